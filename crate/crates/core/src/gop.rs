//! Hierarchical B-frame coding schedules.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EVAL_GOP: usize = 8;
pub const TRAIN_GOP: usize = 4;
/// Deeper midpoints share the last level's lambda.
pub const MAX_LEVEL: u8 = 2;
pub const LEVEL_FACTORS: [f64; 3] = [1.0, 0.85, 0.7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameType {
    I,
    B,
}

impl FrameType {
    pub fn code(self) -> u8 {
        match self {
            FrameType::I => 0,
            FrameType::B => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(FrameType::I),
            1 => Some(FrameType::B),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodingStep {
    pub display_index: usize,
    pub coding_order: usize,
    pub frame_type: FrameType,
    pub ref_prev: Option<usize>,
    pub ref_next: Option<usize>,
    pub level: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoPSchedule {
    pub steps: Vec<CodingStep>,
    pub gop_size: usize,
}

impl GoPSchedule {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn n_frames(&self) -> usize {
        self.steps.len()
    }

    pub fn coding_order(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.display_index).collect()
    }

    /// Steps indexed by display position.
    pub fn by_display(&self) -> Vec<CodingStep> {
        let mut v = self.steps.clone();
        v.sort_by_key(|s| s.display_index);
        v
    }

    /// Checks coverage and that references precede their users.
    pub fn validate(&self) -> Result<()> {
        let n = self.steps.len();
        let mut coded = vec![false; n];
        for (k, s) in self.steps.iter().enumerate() {
            let bad = |m: &str| Error::invalid(format!("step {k} (frame {}): {m}", s.display_index));
            if s.coding_order != k {
                return Err(bad("coding order out of sequence"));
            }
            if s.display_index >= n || coded[s.display_index] {
                return Err(bad("frame missing or coded twice"));
            }
            match s.frame_type {
                FrameType::I => {
                    if s.level != 0 || s.ref_prev.is_some() || s.ref_next.is_some() {
                        return Err(bad("I-frame with references or nonzero level"));
                    }
                }
                FrameType::B => {
                    let (Some(p), Some(q)) = (s.ref_prev, s.ref_next) else {
                        return Err(bad("B-frame without two references"));
                    };
                    if !(p < s.display_index && s.display_index < q) || q >= n || !coded[p] || !coded[q] {
                        return Err(bad("reference not bracketing or not yet coded"));
                    }
                    if s.level == 0 || s.level > MAX_LEVEL {
                        return Err(bad("B-frame level out of range"));
                    }
                }
            }
            coded[s.display_index] = true;
        }
        Ok(())
    }
}

impl fmt::Display for GoPSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# gop_size={} frames={}", self.gop_size, self.steps.len())?;
        writeln!(f, "order  frame  type  refs       level")?;
        for s in &self.steps {
            let refs = match (s.ref_prev, s.ref_next) {
                (Some(p), Some(q)) => format!("({p},{q})"),
                _ => "-".to_string(),
            };
            let t = match s.frame_type {
                FrameType::I => "I",
                FrameType::B => "B",
            };
            writeln!(f, "{:<6} {:<6} {:<5} {:<10} {}", s.coding_order, s.display_index, t, refs, s.level)?;
        }
        Ok(())
    }
}

fn push(steps: &mut Vec<CodingStep>, display: usize, ty: FrameType, refs: Option<(usize, usize)>, level: u8) {
    steps.push(CodingStep {
        display_index: display,
        coding_order: steps.len(),
        frame_type: ty,
        ref_prev: refs.map(|r| r.0),
        ref_next: refs.map(|r| r.1),
        level,
    });
}

fn bisect(steps: &mut Vec<CodingStep>, a: usize, b: usize, depth: u8) {
    if b - a < 2 {
        return;
    }
    let m = (a + b) / 2;
    push(steps, m, FrameType::B, Some((a, b)), depth.min(MAX_LEVEL));
    bisect(steps, a, m, depth + 1);
    bisect(steps, m, b, depth + 1);
}

/// I-frames at multiples of `gop_size` and at the last frame; the frames
/// between two I-frames are coded by recursive midpoint splitting.
pub fn build_schedule(n_frames: usize, gop_size: usize) -> Result<GoPSchedule> {
    if n_frames == 0 {
        return Err(Error::invalid("schedule needs at least one frame"));
    }
    if gop_size == 0 || gop_size > u8::MAX as usize {
        return Err(Error::invalid(format!("gop size {gop_size} out of range 1..=255")));
    }
    let mut steps = Vec::with_capacity(n_frames);
    push(&mut steps, 0, FrameType::I, None, 0);
    let mut start = 0;
    while start + 1 < n_frames {
        let end = (start + gop_size).min(n_frames - 1);
        push(&mut steps, end, FrameType::I, None, 0);
        bisect(&mut steps, start, end, 1);
        start = end;
    }
    Ok(GoPSchedule { steps, gop_size })
}

/// The five-frame tuple used in training: I B B B I with the centre frame
/// at level 1.
pub fn training_schedule() -> GoPSchedule {
    build_schedule(TRAIN_GOP + 1, TRAIN_GOP).expect("fixed schedule")
}

pub fn lambda_for_level(base_lambda: f64, level: u8) -> Result<f64> {
    if !(base_lambda > 0.0) || !base_lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be positive, got {base_lambda}")));
    }
    let f = LEVEL_FACTORS
        .get(level as usize)
        .ok_or_else(|| Error::invalid(format!("unknown coding level {level}")))?;
    Ok(base_lambda * f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gop8_order_and_levels() {
        let s = build_schedule(9, 8).unwrap();
        assert_eq!(s.coding_order(), vec![0, 8, 4, 2, 1, 3, 6, 5, 7]);
        let lv: Vec<u8> = s.by_display().iter().map(|s| s.level).collect();
        assert_eq!(lv, vec![0, 2, 2, 2, 1, 2, 2, 2, 0]);
        let f2 = s.steps.iter().find(|s| s.display_index == 2).unwrap();
        assert_eq!((f2.ref_prev, f2.ref_next), (Some(0), Some(4)));
        let f7 = s.steps.iter().find(|s| s.display_index == 7).unwrap();
        assert_eq!((f7.ref_prev, f7.ref_next), (Some(6), Some(8)));
    }

    #[test]
    fn training_tuple() {
        let s = training_schedule();
        assert_eq!(s.coding_order(), vec![0, 4, 2, 1, 3]);
        let lv: Vec<u8> = s.by_display().iter().map(|s| s.level).collect();
        assert_eq!(lv, vec![0, 2, 1, 2, 0]);
    }

    #[test]
    fn degenerate_and_tail() {
        let s = build_schedule(1, 8).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.steps[0].frame_type, FrameType::I);
        assert!(build_schedule(0, 8).is_err());
        let s = build_schedule(12, 8).unwrap();
        assert_eq!(&s.coding_order()[9..], &[11, 9, 10]);
        let last = s.steps.iter().find(|s| s.display_index == 11).unwrap();
        assert_eq!(last.frame_type, FrameType::I);
    }

    #[test]
    fn lambda_levels() {
        assert_eq!(lambda_for_level(0.01, 0).unwrap(), 0.01);
        assert!((lambda_for_level(0.01, 1).unwrap() - 0.0085).abs() < 1e-15);
        assert!((lambda_for_level(0.01, 2).unwrap() - 0.007).abs() < 1e-15);
        assert!(lambda_for_level(0.01, 3).is_err());
        assert!(lambda_for_level(0.0, 1).is_err());
    }

    proptest! {
        #[test]
        fn schedules_are_valid(n in 1usize..=100, g in 1usize..=16) {
            let s = build_schedule(n, g).unwrap();
            prop_assert_eq!(s.len(), n);
            prop_assert!(s.validate().is_ok());
            for st in &s.steps {
                if st.frame_type == FrameType::I {
                    prop_assert!(st.display_index % g == 0 || st.display_index == n - 1);
                }
            }
        }

        #[test]
        fn full_gop_refs_are_nearest_coded(k in 1usize..=12) {
            let s = build_schedule(8 * k + 1, 8).unwrap();
            let mut coded = std::collections::BTreeSet::new();
            for st in &s.steps {
                if let (Some(p), Some(q)) = (st.ref_prev, st.ref_next) {
                    let below = coded.range(..st.display_index).next_back().copied();
                    let above = coded.range(st.display_index + 1..).next().copied();
                    prop_assert_eq!((below, above), (Some(p), Some(q)));
                }
                coded.insert(st.display_index);
            }
        }
    }
}
