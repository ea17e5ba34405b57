//! Line-oriented scene dataset files.
//!
//! ```text
//! ppcworld-v1
//! seed=7 height=32 width=32 patch=4 n=1 global=[1,2] p1.color=2 p1.action=5 p1.anchor=[8,4] p1.box=[1,0,5,4] p1.desc=[10,20,31,34,37,40] p1.joints=[14.5,7.5,...]
//! ```
//!
//! One scene per line after the version header. Fields are `key=value`
//! pairs separated by single spaces; arrays are bracketed and comma
//! separated. Per-person keys are prefixed `p<index>.`. Rasters are not
//! stored: they are re-rendered from the skeletons on load.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{Canvas, PatchRect, PersonSpec, SceneSpec, Skeleton, JOINT_COUNT};
use crate::error::{Error, PathContext, Result};

pub const DATASET_VERSION: &str = "ppcworld-v1";

fn join<T: std::fmt::Display>(xs: impl IntoIterator<Item = T>) -> String {
    let parts: Vec<String> = xs.into_iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(","))
}

fn encode_scene(s: &SceneSpec) -> String {
    let mut line = format!(
        "seed={} height={} width={} patch={} n={} global={}",
        s.seed,
        s.canvas.height,
        s.canvas.width,
        s.patch,
        s.num_people,
        join(&s.global_tokens)
    );
    for p in &s.persons {
        let i = p.index;
        let b = p.bbox;
        let _ = write!(
            line,
            " p{i}.color={} p{i}.action={} p{i}.anchor={} p{i}.box={} p{i}.desc={} p{i}.joints={}",
            p.color_id,
            p.action_id,
            join(p.anchor),
            join([b.x0, b.y0, b.x1, b.y1]),
            join(&p.desc_tokens),
            join(p.skeleton.joints.iter().flat_map(|j| [j[0], j[1]])),
        );
    }
    line
}

pub fn write_dataset_string(scenes: &[SceneSpec]) -> String {
    let mut out = String::from(DATASET_VERSION);
    out.push('\n');
    for s in scenes {
        out.push_str(&encode_scene(s));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: &Path, scenes: &[SceneSpec]) -> Result<()> {
    let mut f = std::fs::File::create(path).with_path(path)?;
    f.write_all(write_dataset_string(scenes).as_bytes()).with_path(path)
}

struct Fields<'a> {
    line: usize,
    map: HashMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            reason: reason.into(),
        }
    }

    fn take(&mut self, key: &str) -> Result<&'a str> {
        self.map
            .remove(key)
            .ok_or_else(|| self.err(format!("missing field `{key}`")))
    }

    fn scalar<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let raw = self.take(key)?;
        raw.parse()
            .map_err(|_| self.err(format!("bad value `{raw}` for `{key}`")))
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Vec<T>> {
        let raw = self.take(key)?;
        let inner = raw
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(|| self.err(format!("`{key}` is not a bracketed list")))?;
        if inner.is_empty() {
            return Ok(Vec::new());
        }
        inner
            .split(',')
            .map(|t| t.parse().map_err(|_| self.err(format!("bad element `{t}` in `{key}`"))))
            .collect()
    }
}

fn decode_scene(line_no: usize, line: &str) -> Result<SceneSpec> {
    let mut map = HashMap::new();
    for tok in line.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            reason: format!("`{tok}` is not key=value"),
        })?;
        if map.insert(k, v).is_some() {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("duplicate key `{k}`"),
            });
        }
    }
    let mut f = Fields { line: line_no, map };
    let seed = f.scalar("seed")?;
    let canvas = Canvas::new(f.scalar("height")?, f.scalar("width")?);
    let patch = f.scalar("patch")?;
    let n: usize = f.scalar("n")?;
    let global_tokens = f.list("global")?;
    let mut persons = Vec::with_capacity(n);
    for i in 1..=n {
        let anchor: Vec<usize> = f.list(&format!("p{i}.anchor"))?;
        let bx: Vec<usize> = f.list(&format!("p{i}.box"))?;
        let flat: Vec<f64> = f.list(&format!("p{i}.joints"))?;
        if anchor.len() != 2 || bx.len() != 4 || flat.len() != 2 * JOINT_COUNT {
            return Err(f.err(format!("person {i} has malformed arrays")));
        }
        persons.push(PersonSpec {
            index: i,
            color_id: f.scalar(&format!("p{i}.color"))?,
            action_id: f.scalar(&format!("p{i}.action"))?,
            skeleton: Skeleton::new(flat.chunks(2).map(|c| [c[0], c[1]]).collect()),
            bbox: PatchRect::new(bx[0], bx[1], bx[2], bx[3]),
            anchor: [anchor[0], anchor[1]],
            desc_tokens: f.list(&format!("p{i}.desc"))?,
        });
    }
    if let Some(k) = f.map.keys().next() {
        return Err(f.err(format!("unknown key `{k}`")));
    }
    let spec = SceneSpec {
        num_people: n,
        persons,
        global_tokens,
        canvas,
        patch,
        seed,
    };
    spec.validate().map_err(|e| Error::Parse {
        line: line_no,
        reason: e.to_string(),
    })?;
    Ok(spec)
}

pub fn read_dataset_str(text: &str) -> Result<Vec<SceneSpec>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == DATASET_VERSION => {}
        Some((_, h)) => {
            return Err(Error::Parse {
                line: 1,
                reason: format!("expected header `{DATASET_VERSION}`, found `{h}`"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                reason: "empty file".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| decode_scene(i + 1, l))
        .collect()
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneSpec>> {
    let f = std::fs::File::open(path).with_path(path)?;
    let mut text = String::new();
    for line in BufReader::new(f).lines() {
        text.push_str(&line.with_path(path)?);
        text.push('\n');
    }
    read_dataset_str(&text)
}
