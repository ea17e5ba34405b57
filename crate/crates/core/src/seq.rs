//! Token sequence assembly.
//!
//! A stage is laid out as `text | pose_ctx | pose | image`. Text tokens are
//! symbolic ids embedded inside the model; visual segments are raw
//! patch vectors projected inside the model. Every token carries a
//! `(tau, x, y)` position and the timestep its modality is noised at.

use std::ops::Range;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::vocab;
use crate::world::{PatchRect, StagePrompt, CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Text,
    PoseCtx,
    Pose,
    Image,
}

/// Rotary coordinates of one token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct PositionId {
    /// Person identity axis; 0 means "no person".
    pub tau: u32,
    pub x: u32,
    pub y: u32,
}

impl PositionId {
    pub fn new(tau: u32, x: u32, y: u32) -> Self {
        Self { tau, x, y }
    }
}

/// Which segments a sequence has and how long they are.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    pub text_len: usize,
    pub has_ctx: bool,
    pub has_pose: bool,
    pub grid_w: usize,
    pub grid_h: usize,
}

impl SegmentLayout {
    pub fn grid_len(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn text(&self) -> Range<usize> {
        0..self.text_len
    }

    pub fn ctx(&self) -> Range<usize> {
        let s = self.text_len;
        s..s + if self.has_ctx { self.grid_len() } else { 0 }
    }

    pub fn pose(&self) -> Range<usize> {
        let s = self.ctx().end;
        s..s + if self.has_pose { self.grid_len() } else { 0 }
    }

    pub fn image(&self) -> Range<usize> {
        let s = self.pose().end;
        s..s + self.grid_len()
    }

    pub fn total(&self) -> usize {
        self.image().end
    }

    pub fn kinds(&self) -> Vec<TokenKind> {
        let mut k = vec![TokenKind::Text; self.text_len];
        k.extend(std::iter::repeat_n(TokenKind::PoseCtx, self.ctx().len()));
        k.extend(std::iter::repeat_n(TokenKind::Pose, self.pose().len()));
        k.extend(std::iter::repeat_n(TokenKind::Image, self.grid_len()));
        k
    }
}

fn visual_tau(boxes: &[(usize, PatchRect)], limit: usize, gx: usize, gy: usize) -> u32 {
    boxes
        .iter()
        .filter(|(i, b)| *i <= limit && b.contains(gx, gy))
        .map(|(i, _)| *i as u32)
        .next_back()
        .unwrap_or(0)
}

/// Assigns `(tau, x, y)` to every token of a layout.
///
/// Visual tokens take the index of the last box (in person order) covering
/// their cell, or 0; context tokens only see boxes of persons below
/// `ctx_persons + 1`. Text tokens sit at `x = y = 0` with `tau = i` inside the
/// span of person `i` and 0 elsewhere.
pub fn assign_positions(
    layout: &SegmentLayout,
    boxes: &[(usize, PatchRect)],
    ctx_persons: usize,
    text_spans: &[(usize, Range<usize>)],
) -> Result<Vec<PositionId>> {
    let mut spans: Vec<&(usize, Range<usize>)> = text_spans.iter().collect();
    spans.sort_by_key(|(_, r)| (r.start, r.end));
    for w in spans.windows(2) {
        if w[0].1.end > w[1].1.start {
            return Err(Error::SpanConflict(format!(
                "person {} span {:?} overlaps person {} span {:?}",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
    }
    if let Some((i, r)) = spans.iter().find(|(_, r)| r.end > layout.text_len) {
        return Err(Error::SpanConflict(format!(
            "person {i} span {r:?} exceeds text length {}",
            layout.text_len
        )));
    }
    let mut ordered = boxes.to_vec();
    ordered.sort_by_key(|(i, _)| *i);

    let mut out = vec![PositionId::default(); layout.total()];
    for (i, r) in text_spans {
        for p in &mut out[r.clone()] {
            p.tau = *i as u32;
        }
    }
    let grid = |range: Range<usize>, limit: usize, out: &mut [PositionId]| {
        for (k, t) in range.enumerate() {
            let (gx, gy) = (k % layout.grid_w, k / layout.grid_w);
            out[t] = PositionId::new(visual_tau(&ordered, limit, gx, gy), gx as u32, gy as u32);
        }
    };
    grid(layout.ctx(), ctx_persons, &mut out);
    grid(layout.pose(), usize::MAX, &mut out);
    grid(layout.image(), usize::MAX, &mut out);
    Ok(out)
}

/// Splits a raster into non-overlapping `p × p` patches, row-major over the
/// grid, each flattened channel-major.
pub fn patchify(r: &Raster, p: usize) -> Result<Array2<f64>> {
    let (c, h, w) = r.dims();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{h}x{w} raster not divisible by patch {p}"
        )));
    }
    let (gw, gh) = (w / p, h / p);
    let mut out = Array2::zeros((gw * gh, c * p * p));
    let data = r.data();
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        out[[row, ch * p * p + dy * p + dx]] = data[[ch, gy * p + dy, gx * p + dx]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Array2<f64>, grid: (usize, usize), p: usize) -> Result<Raster> {
    let (gw, gh) = grid;
    let (n, dim) = tokens.dim();
    if n != gw * gh {
        return Err(Error::ShapeMismatch(format!("{n} tokens for a {gw}x{gh} grid")));
    }
    if p == 0 || dim % (p * p) != 0 {
        return Err(Error::ShapeMismatch(format!(
            "token width {dim} not a multiple of {p}x{p}"
        )));
    }
    let c = dim / (p * p);
    let mut out = ndarray::Array3::zeros((c, gh * p, gw * p));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        out[[ch, gy * p + dy, gx * p + dx]] = tokens[[row, ch * p * p + dy * p + dx]];
                    }
                }
            }
        }
    }
    Ok(Raster::from_array(out))
}

/// A fully assembled stage, ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub layout: SegmentLayout,
    pub patch: usize,
    /// Text ids: global summary first, then the per-person descriptions.
    pub text_ids: Vec<u32>,
    /// Global summary ids; their mean embedding is the pooled conditioning.
    pub global_ids: Vec<u32>,
    pub ctx_patches: Option<Array2<f64>>,
    pub pose_patches: Option<Array2<f64>>,
    pub image_patches: Array2<f64>,
    pub kinds: Vec<TokenKind>,
    pub positions: Vec<PositionId>,
    pub t_mod: Vec<f64>,
    pub t_pose: f64,
    pub t_img: f64,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.layout.grid_w, self.layout.grid_h)
    }

    /// Width of one flattened patch.
    pub fn patch_dim(&self) -> usize {
        self.image_patches.ncols()
    }

    /// Replaces every text token by the null token (unconditional branch).
    pub fn without_text(&self) -> TokenBatch {
        let mut b = self.clone();
        b.text_ids.iter_mut().for_each(|t| *t = vocab::NULL);
        b.global_ids.iter_mut().for_each(|t| *t = vocab::NULL);
        b
    }

    /// Checks the segment/position invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ShapeMismatch(m));
        let n = self.layout.total();
        if self.kinds.len() != n || self.positions.len() != n || self.t_mod.len() != n {
            return bad(format!("per-token arrays disagree with layout length {n}"));
        }
        if self.text_ids.len() != self.layout.text_len {
            return bad("text ids disagree with layout".into());
        }
        let g = self.layout.grid_len();
        let dim = self.patch_dim();
        if self.image_patches.nrows() != g {
            return bad(format!("image has {} patches, grid {g}", self.image_patches.nrows()));
        }
        for (name, seg, want) in [
            ("context", &self.ctx_patches, self.layout.has_ctx),
            ("pose", &self.pose_patches, self.layout.has_pose),
        ] {
            match (seg, want) {
                (Some(a), true) if a.dim() == (g, dim) => {}
                (None, false) => {}
                _ => return bad(format!("{name} segment inconsistent with layout")),
            }
        }
        Ok(())
    }
}

/// Options that alter how a stage is turned into tokens.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssembleOptions {
    /// Give per-person text tokens their person index on the tau axis.
    pub text_tau: bool,
    /// Include the pose segments (absent during backbone pretraining).
    pub include_pose: bool,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        Self {
            text_tau: true,
            include_pose: true,
        }
    }
}

/// Builds the token sequence `[C_i; P_{i-1}; P_i^(t_pose); I^(t_img)]`.
///
/// `context` is the clean previous pose state; pass `None` at stage 1 (or in
/// single-pass mode) to omit the segment.
#[allow(clippy::too_many_arguments)]
pub fn assemble_sequence(
    prompt: &StagePrompt,
    context: Option<&Raster>,
    noised_pose: Option<&Raster>,
    noised_image: &Raster,
    t_pose: f64,
    t_img: f64,
    patch: usize,
    opts: AssembleOptions,
) -> Result<TokenBatch> {
    let (c, h, w) = noised_image.dims();
    if c != CHANNELS {
        return Err(Error::ShapeMismatch(format!("image has {c} channels")));
    }
    for r in context.into_iter().chain(noised_pose) {
        if r.dims() != (c, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "raster {:?} does not match image {:?}",
                r.dims(),
                (c, h, w)
            )));
        }
    }
    if opts.include_pose != noised_pose.is_some() {
        return Err(Error::ShapeMismatch(
            "pose segment presence disagrees with options".into(),
        ));
    }
    let context = if opts.include_pose { context } else { None };
    let g = prompt.global_tokens.len();
    let text_ids: Vec<u32> = prompt
        .global_tokens
        .iter()
        .chain(&prompt.text_tokens)
        .copied()
        .collect();
    let layout = SegmentLayout {
        text_len: text_ids.len(),
        has_ctx: context.is_some(),
        has_pose: noised_pose.is_some(),
        grid_w: w / patch.max(1),
        grid_h: h / patch.max(1),
    };
    let spans: Vec<(usize, Range<usize>)> = if opts.text_tau {
        prompt
            .text_tokens
            .chunks(prompt.desc_len.max(1))
            .enumerate()
            .map(|(k, _)| (k + 1, g + k * prompt.desc_len..g + (k + 1) * prompt.desc_len))
            .collect()
    } else {
        Vec::new()
    };
    let ctx_persons = prompt.stage.saturating_sub(1);
    let positions = assign_positions(&layout, &prompt.boxes, ctx_persons, &spans)?;
    let kinds = layout.kinds();
    let t_mod = kinds
        .iter()
        .map(|k| match k {
            TokenKind::Text | TokenKind::PoseCtx => 0.0,
            TokenKind::Pose => t_pose,
            TokenKind::Image => t_img,
        })
        .collect();
    let batch = TokenBatch {
        layout,
        patch,
        text_ids,
        global_ids: prompt.global_tokens.clone(),
        ctx_patches: context.map(|r| patchify(r, patch)).transpose()?,
        pose_patches: noised_pose.map(|r| patchify(r, patch)).transpose()?,
        image_patches: patchify(noised_image, patch)?,
        kinds,
        positions,
        t_mod,
        t_pose,
        t_img,
    };
    batch.validate()?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{decompose_stages, gen_scene, WorldConfig};

    fn layout() -> SegmentLayout {
        SegmentLayout {
            text_len: 14,
            has_ctx: false,
            has_pose: true,
            grid_w: 8,
            grid_h: 8,
        }
    }

    #[test]
    fn tau_follows_boxes_with_overwrite() {
        let boxes = [(1, PatchRect::new(0, 0, 4, 4)), (2, PatchRect::new(3, 3, 7, 7))];
        let l = layout();
        let pos = assign_positions(&l, &boxes, 0, &[(1, 2..8), (2, 8..14)]).unwrap();
        let at = |x: usize, y: usize| pos[l.image().start + y * 8 + x];
        assert_eq!(at(5, 3), PositionId::new(2, 5, 3));
        assert_eq!(at(7, 7), PositionId::new(0, 7, 7));
        assert_eq!(at(3, 3), PositionId::new(2, 3, 3));
        assert_eq!(at(1, 1), PositionId::new(1, 1, 1));
        assert_eq!(pos[0], PositionId::new(0, 0, 0));
        assert_eq!(pos[2], PositionId::new(1, 0, 0));
        assert_eq!(pos[13], PositionId::new(2, 0, 0));
    }

    #[test]
    fn overlapping_spans_rejected() {
        let err = assign_positions(&layout(), &[], 0, &[(1, 2..8), (2, 7..13)]).unwrap_err();
        assert!(matches!(err, Error::SpanConflict(_)));
    }

    #[test]
    fn stage_one_has_no_context_and_64_tokens_per_raster() {
        let cfg = WorldConfig {
            height: 16,
            width: 16,
            patch: 2,
            ..WorldConfig::default()
        };
        let s = gen_scene(1, &cfg).unwrap();
        let st = &decompose_stages(&s)[0];
        let img = st.target_image.clone().unwrap();
        let b = assemble_sequence(
            &st.prompt,
            None,
            Some(&st.target_pose),
            &img,
            0.3,
            0.9,
            2,
            AssembleOptions::default(),
        )
        .unwrap();
        assert!(b.ctx_patches.is_none());
        assert_eq!(b.pose_patches.as_ref().unwrap().nrows(), 64);
        assert_eq!(b.image_patches.nrows(), 64);
        let kinds = &b.kinds;
        assert!(kinds
            .windows(2)
            .all(|w| !(w[0] == TokenKind::Image && w[1] != TokenKind::Image)));
        for (k, t) in kinds.iter().zip(&b.t_mod) {
            match k {
                TokenKind::Pose => assert_eq!(*t, 0.3),
                TokenKind::Image => assert_eq!(*t, 0.9),
                _ => assert_eq!(*t, 0.0),
            }
        }
        let (p, i) = (b.layout.pose(), b.layout.image());
        for k in 0..64 {
            let (a, c) = (b.positions[p.start + k], b.positions[i.start + k]);
            assert_eq!((a.x, a.y, a.tau), (c.x, c.y, c.tau));
        }
    }

    #[test]
    fn patchify_inverse_and_locality() {
        let s = gen_scene(3, &WorldConfig::default().with_people(2)).unwrap();
        let r = crate::world::render_rgb(&s);
        let t = patchify(&r, 4).unwrap();
        assert_eq!(unpatchify(&t, (8, 8), 4).unwrap(), r);

        let z = Array2::zeros((64, 48));
        assert!(unpatchify(&z, (8, 8), 4).unwrap().data().iter().all(|&v| v == 0.0));

        let mut one = Array2::zeros((64, 48));
        one.row_mut(8 * 2 + 5).fill(1.0);
        let out = unpatchify(&one, (8, 8), 4).unwrap();
        for ((_, y, x), &v) in out.data().indexed_iter() {
            let inside = (20..24).contains(&x) && (8..12).contains(&y);
            assert_eq!(v != 0.0, inside);
        }
        assert!(unpatchify(&Array2::zeros((63, 48)), (8, 8), 4).is_err());
    }
}
