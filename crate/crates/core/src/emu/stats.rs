//! Stack depth and frame size statistics over execution traces.

use serde::{Deserialize, Serialize};

use super::machine::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quartiles with linear interpolation between closest ranks
/// (position `p * (n - 1)` in the sorted sample).
pub fn quartiles(samples: &[f64]) -> Option<Quartiles> {
    if samples.is_empty() {
        return None;
    }
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let at = |p: f64| {
        let h = p * (v.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    Some(Quartiles { min: v[0], q1: at(0.25), median: at(0.5), q3: at(0.75), max: v[v.len() - 1] })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackStats {
    pub callsite_occurrences: usize,
    /// Live frames per callsite occurrence.
    pub frame_count: Option<Quartiles>,
    /// Sizes of every live frame at every callsite occurrence.
    pub frame_size: Option<Quartiles>,
    pub max_depth: usize,
}

pub fn stack_stats(trace: &Trace) -> StackStats {
    let mut counts = Vec::new();
    let mut sizes = Vec::new();
    for c in trace.calls() {
        counts.push(c.frames.len() as f64);
        sizes.extend(c.frames.iter().map(|&z| z as f64));
    }
    StackStats {
        callsite_occurrences: counts.len(),
        frame_count: quartiles(&counts),
        frame_size: quartiles(&sizes),
        max_depth: counts.iter().fold(0.0f64, |a, &b| a.max(b)) as usize,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolated_quartiles() {
        let q = quartiles(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((q.min, q.q1, q.median, q.q3, q.max), (1.0, 1.75, 2.5, 3.25, 4.0));
        let q = quartiles(&[7.0]).unwrap();
        assert_eq!(q.median, 7.0);
        assert!(quartiles(&[]).is_none());
    }
}
