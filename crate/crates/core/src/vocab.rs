//! Closed symbolic vocabulary shared by scene descriptions and the text stream.
//!
//! Ids are laid out in fixed blocks so that descriptions can be built and
//! read back with arithmetic alone.

pub const VOCAB_SIZE: usize = 64;

/// Replacement for every text token when conditioning is dropped.
pub const NULL: u32 = 0;
pub const SCENE: u32 = 1;
const COUNT_BASE: u32 = 2;
const PERSON_BASE: u32 = 10;
const COLOR_BASE: u32 = 18;
const ACTION_BASE: u32 = 26;
const ROW_BASE: u32 = 34;
const COL_BASE: u32 = 37;
pub const END: u32 = 40;

/// Upper bound on people, palette entries and action classes the vocabulary can name.
pub const MAX_SLOTS: usize = 8;
/// Coarse position bands per axis.
pub const POSITION_BANDS: usize = 3;
/// Tokens per description that carry information; the rest are `END` padding.
pub const DESC_INFORMATIVE: usize = 5;

pub fn count(n: usize) -> u32 {
    debug_assert!((1..=MAX_SLOTS).contains(&n));
    COUNT_BASE + (n as u32 - 1)
}

pub fn person(index: usize) -> u32 {
    debug_assert!((1..=MAX_SLOTS).contains(&index));
    PERSON_BASE + (index as u32 - 1)
}

pub fn color(id: usize) -> u32 {
    debug_assert!(id < MAX_SLOTS);
    COLOR_BASE + id as u32
}

pub fn action(id: usize) -> u32 {
    debug_assert!(id < MAX_SLOTS);
    ACTION_BASE + id as u32
}

pub fn row(band: usize) -> u32 {
    ROW_BASE + band.min(POSITION_BANDS - 1) as u32
}

pub fn col(band: usize) -> u32 {
    COL_BASE + band.min(POSITION_BANDS - 1) as u32
}

/// Person description: `[PERSON, COLOR, ACTION, ROW, COL, END, END, ...]`.
pub fn describe_person(index: usize, color_id: usize, action_id: usize, bands: (usize, usize), len: usize) -> Vec<u32> {
    let mut tokens = vec![
        person(index),
        color(color_id),
        action(action_id),
        row(bands.0),
        col(bands.1),
    ];
    tokens.resize(len.max(DESC_INFORMATIVE), END);
    tokens.truncate(len.max(DESC_INFORMATIVE));
    tokens
}

/// Global summary tokens for an `n`-person scene.
pub fn describe_scene(n: usize) -> Vec<u32> {
    vec![SCENE, count(n)]
}

/// Decoded form of a person description.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PersonTokens {
    pub index: usize,
    pub color_id: usize,
    pub action_id: usize,
    pub bands: (usize, usize),
}

pub fn parse_person(tokens: &[u32]) -> Option<PersonTokens> {
    if tokens.len() < DESC_INFORMATIVE {
        return None;
    }
    let in_block = |t: u32, base: u32, n: usize| (base..base + n as u32).contains(&t);
    let (p, c, a, r, k) = (tokens[0], tokens[1], tokens[2], tokens[3], tokens[4]);
    if !(in_block(p, PERSON_BASE, MAX_SLOTS)
        && in_block(c, COLOR_BASE, MAX_SLOTS)
        && in_block(a, ACTION_BASE, MAX_SLOTS)
        && in_block(r, ROW_BASE, POSITION_BANDS)
        && in_block(k, COL_BASE, POSITION_BANDS))
    {
        return None;
    }
    Some(PersonTokens {
        index: (p - PERSON_BASE) as usize + 1,
        color_id: (c - COLOR_BASE) as usize,
        action_id: (a - ACTION_BASE) as usize,
        bands: ((r - ROW_BASE) as usize, (k - COL_BASE) as usize),
    })
}
