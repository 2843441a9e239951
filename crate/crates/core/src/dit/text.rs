//! Toy caption vocabulary. Captions are four tokens:
//! `[BOS, color, shape, motion]`; the null caption replaces the last three
//! with `NULL`.

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 64;
pub const CAPTION_LEN: usize = 4;

pub const BOS: u32 = 1;
pub const NULL: u32 = 2;

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "cyan", "magenta"];
pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
pub const MOTIONS: [&str; 5] = ["left", "right", "up", "down", "static"];

const COLOR_BASE: u32 = 8;
const SHAPE_BASE: u32 = 16;
const MOTION_BASE: u32 = 24;

/// Token ids of a structured caption.
pub fn caption_tokens(color: usize, shape: usize, motion: usize) -> Result<Vec<u32>> {
    if color >= COLORS.len() || shape >= SHAPES.len() || motion >= MOTIONS.len() {
        return Err(Error::invalid(format!(
            "caption indices ({color},{shape},{motion}) out of range"
        )));
    }
    Ok(vec![
        BOS,
        COLOR_BASE + color as u32,
        SHAPE_BASE + shape as u32,
        MOTION_BASE + motion as u32,
    ])
}

pub fn null_caption() -> Vec<u32> {
    vec![BOS, NULL, NULL, NULL]
}

/// Parses a prompt such as `"red square right"` (words in any order).
pub fn tokenize(prompt: &str) -> Result<Vec<u32>> {
    let (mut color, mut shape, mut motion) = (None, None, None);
    for word in prompt.split_whitespace() {
        let w = word.to_ascii_lowercase();
        if let Some(i) = COLORS.iter().position(|c| *c == w) {
            color = Some(i);
        } else if let Some(i) = SHAPES.iter().position(|c| *c == w) {
            shape = Some(i);
        } else if let Some(i) = MOTIONS.iter().position(|c| *c == w) {
            motion = Some(i);
        } else {
            return Err(Error::invalid(format!("unknown prompt word `{word}`")));
        }
    }
    match (color, shape, motion) {
        (Some(c), Some(s), Some(m)) => caption_tokens(c, s, m),
        _ => Err(Error::invalid(format!(
            "prompt `{prompt}` needs a color, a shape and a motion"
        ))),
    }
}

/// Inverse of [`caption_tokens`] for logging.
pub fn describe(tokens: &[u32]) -> String {
    let word = |t: u32| -> &'static str {
        match t {
            BOS => "<bos>",
            NULL => "<null>",
            t if (COLOR_BASE..COLOR_BASE + 6).contains(&t) => COLORS[(t - COLOR_BASE) as usize],
            t if (SHAPE_BASE..SHAPE_BASE + 3).contains(&t) => SHAPES[(t - SHAPE_BASE) as usize],
            t if (MOTION_BASE..MOTION_BASE + 5).contains(&t) => MOTIONS[(t - MOTION_BASE) as usize],
            _ => "<unk>",
        }
    };
    tokens.iter().map(|&t| word(t)).collect::<Vec<_>>().join(" ")
}
