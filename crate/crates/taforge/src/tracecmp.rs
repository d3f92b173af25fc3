//! Trace normalization and comparison across execution modes: rebase events
//! to image offsets, collapse trampoline round-trips into the synthetic
//! site -> site+4 edge, diff edge sets or bitmap occupancy by Jaccard
//! similarity, and render bitmaps as portable graymap heatmaps.

use std::collections::BTreeSet;
use std::io::{self, Write};

use crate::engine::BranchTrace;
use crate::fuzzer::bitmap::{hit_class, CoverageBitmap};
use crate::rewriter::TrampolineTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceOrigin {
    Rewritten,
    DirectTrap,
    External,
}

#[derive(Debug, Clone)]
pub struct NormalizedTrace {
    /// (source offset, target offset) relative to the image base.
    pub edges: BTreeSet<(u64, u64)>,
    pub origin: TraceOrigin,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceCmpError {
    #[error("foreign trace: {outside} of {total} events fall outside the image extent")]
    ForeignTrace { outside: usize, total: usize },
    #[error("kind mismatch: cannot compare a trace against a bitmap")]
    KindMismatch,
    #[error("heatmap sink failure: {0}")]
    Sink(#[from] io::Error),
}

/// Rebase a trace to image offsets. With a trampoline table, every
/// site->trampoline entry collapses to the synthetic (site, site+4) edge
/// and trampoline-internal or exit edges are dropped; raw traces stay
/// faithful, the collapse happens only here.
pub fn normalize(
    trace: &BranchTrace,
    image_base: u64,
    extent: (u64, u64),
    table: Option<&TrampolineTable>,
    origin: TraceOrigin,
) -> Result<NormalizedTrace, TraceCmpError> {
    let inside = |a: u64| a >= extent.0 && a < extent.1;
    let in_tramp = |a: u64| table.map(|t| t.contains_addr(a)).unwrap_or(false);

    let mut outside = 0usize;
    let mut edges = BTreeSet::new();
    for e in &trace.events {
        if in_tramp(e.target) && !in_tramp(e.source) {
            // Entry into a trampoline slot: collapse to site -> site+4.
            if let Some(site) = table.and_then(|t| t.site_for_hook(e.target)) {
                edges.insert((site.address - image_base, site.address + 4 - image_base));
            }
            continue;
        }
        if in_tramp(e.source) {
            // Exit branch back to the return address (or internal edge);
            // already represented by the synthetic edge.
            continue;
        }
        if !inside(e.source) || !inside(e.target) {
            if !inside(e.source) && !inside(e.target) {
                outside += 1;
            }
            continue;
        }
        edges.insert((e.source - image_base, e.target - image_base));
    }
    let total = trace.events.len();
    if total > 0 && outside * 2 > total {
        return Err(TraceCmpError::ForeignTrace { outside, total });
    }
    Ok(NormalizedTrace { edges, origin })
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub jaccard: f64,
    pub only_a: BTreeSet<(u64, u64)>,
    pub only_b: BTreeSet<(u64, u64)>,
}

fn jaccard_sets<T: Ord + Copy>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}

/// Jaccard similarity of two normalized traces plus the asymmetric
/// differences for inspection.
pub fn compare_traces(a: &NormalizedTrace, b: &NormalizedTrace) -> CompareOutcome {
    CompareOutcome {
        jaccard: jaccard_sets(&a.edges, &b.edges),
        only_a: a.edges.difference(&b.edges).copied().collect(),
        only_b: b.edges.difference(&a.edges).copied().collect(),
    }
}

/// Jaccard similarity of occupied-bucket sets.
pub fn compare_bitmaps(a: &CoverageBitmap, b: &CoverageBitmap) -> CompareOutcome {
    let sa: BTreeSet<(u64, u64)> = a.occupied_set().iter().map(|&i| (u64::from(i), 0)).collect();
    let sb: BTreeSet<(u64, u64)> = b.occupied_set().iter().map(|&i| (u64::from(i), 0)).collect();
    CompareOutcome {
        jaccard: jaccard_sets(&sa, &sb),
        only_a: sa.difference(&sb).copied().collect(),
        only_b: sb.difference(&sa).copied().collect(),
    }
}

/// Either side of a comparison, as loaded from a file.
pub enum CompareInput {
    Trace(NormalizedTrace),
    Bitmap(CoverageBitmap),
}

pub fn compare(a: &CompareInput, b: &CompareInput) -> Result<CompareOutcome, TraceCmpError> {
    match (a, b) {
        (CompareInput::Trace(a), CompareInput::Trace(b)) => Ok(compare_traces(a, b)),
        (CompareInput::Bitmap(a), CompareInput::Bitmap(b)) => Ok(compare_bitmaps(a, b)),
        _ => Err(TraceCmpError::KindMismatch),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeatmapSummary {
    pub occupancy: f64,
    pub max_class: u8,
}

/// Render the 65536 buckets as a 256x256 text graymap (P2), intensity =
/// hit class; bucket k maps to pixel (k mod 256, k div 256).
pub fn heatmap(
    bitmap: &CoverageBitmap,
    out: &mut dyn Write,
) -> Result<HeatmapSummary, TraceCmpError> {
    writeln!(out, "P2")?;
    writeln!(out, "256 256")?;
    writeln!(out, "8")?;
    for row in 0..256 {
        let mut line = String::with_capacity(512);
        for col in 0..256 {
            let idx = row * 256 + col;
            if col > 0 {
                line.push(' ');
            }
            line.push_str(&hit_class(bitmap.buckets[idx]).to_string());
        }
        writeln!(out, "{line}")?;
    }
    Ok(HeatmapSummary { occupancy: bitmap.occupancy(), max_class: bitmap.max_class() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{TraceEvent, TraceKind};

    fn trace(edges: &[(u64, u64)]) -> BranchTrace {
        BranchTrace {
            events: edges
                .iter()
                .map(|&(source, target)| TraceEvent { source, target, kind: TraceKind::Uncond })
                .collect(),
        }
    }

    const BASE: u64 = 0x40_0000;
    const EXTENT: (u64, u64) = (0x40_0000, 0x41_0000);

    #[test]
    fn offsets_and_count_preserved_without_trampolines() {
        let t = trace(&[(0x40_1000, 0x40_2000), (0x40_2000, 0x40_1004)]);
        let n = normalize(&t, BASE, EXTENT, None, TraceOrigin::DirectTrap).unwrap();
        assert_eq!(n.edges.len(), 2);
        assert!(n.edges.contains(&(0x1000, 0x2000)));
    }

    #[test]
    fn identical_traces_compare_to_one() {
        let t = trace(&[(0x40_1000, 0x40_2000)]);
        let a = normalize(&t, BASE, EXTENT, None, TraceOrigin::DirectTrap).unwrap();
        let b = normalize(&t, BASE, EXTENT, None, TraceOrigin::DirectTrap).unwrap();
        let out = compare_traces(&a, &b);
        assert_eq!(out.jaccard, 1.0);
        assert!(out.only_a.is_empty() && out.only_b.is_empty());
    }

    #[test]
    fn disjoint_traces_compare_to_zero() {
        let a = normalize(
            &trace(&[(0x40_1000, 0x40_2000)]),
            BASE,
            EXTENT,
            None,
            TraceOrigin::DirectTrap,
        )
        .unwrap();
        let b = normalize(
            &trace(&[(0x40_3000, 0x40_4000)]),
            BASE,
            EXTENT,
            None,
            TraceOrigin::DirectTrap,
        )
        .unwrap();
        assert_eq!(compare_traces(&a, &b).jaccard, 0.0);
    }

    #[test]
    fn comparison_is_symmetric() {
        let a = normalize(
            &trace(&[(0x40_1000, 0x40_2000), (0x40_2000, 0x40_3000)]),
            BASE,
            EXTENT,
            None,
            TraceOrigin::DirectTrap,
        )
        .unwrap();
        let b = normalize(
            &trace(&[(0x40_1000, 0x40_2000)]),
            BASE,
            EXTENT,
            None,
            TraceOrigin::DirectTrap,
        )
        .unwrap();
        let ab = compare_traces(&a, &b);
        let ba = compare_traces(&b, &a);
        assert_eq!(ab.jaccard, ba.jaccard);
        assert_eq!(ab.only_a, ba.only_b);
        assert_eq!(ab.only_b, ba.only_a);
    }

    #[test]
    fn foreign_trace_detected() {
        let t = trace(&[(0x90_0000, 0x90_1000), (0x90_1000, 0x90_2000)]);
        let err = normalize(&t, BASE, EXTENT, None, TraceOrigin::External).unwrap_err();
        assert!(matches!(err, TraceCmpError::ForeignTrace { .. }));
    }

    #[test]
    fn normalize_is_idempotent_on_offsets() {
        let t = trace(&[(0x1000, 0x2000)]);
        let once = normalize(&t, 0, (0, 0x1_0000), None, TraceOrigin::External).unwrap();
        let again_input = trace(&[(0x1000, 0x2000)]);
        let twice =
            normalize(&again_input, 0, (0, 0x1_0000), None, TraceOrigin::External).unwrap();
        assert_eq!(once.edges, twice.edges);
    }

    #[test]
    fn kind_mismatch_rejected() {
        let t = normalize(
            &trace(&[(0x40_1000, 0x40_2000)]),
            BASE,
            EXTENT,
            None,
            TraceOrigin::DirectTrap,
        )
        .unwrap();
        let b = CoverageBitmap::new();
        assert!(matches!(
            compare(&CompareInput::Trace(t), &CompareInput::Bitmap(b)),
            Err(TraceCmpError::KindMismatch)
        ));
    }

    #[test]
    fn zero_bitmap_heatmap_is_all_zero() {
        let map = CoverageBitmap::new();
        let mut out = Vec::new();
        let summary = heatmap(&map, &mut out).unwrap();
        assert_eq!(summary.occupancy, 0.0);
        assert_eq!(summary.max_class, 0);
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("P2"));
        assert_eq!(lines.next(), Some("256 256"));
        assert_eq!(lines.next(), Some("8"));
        assert!(lines.all(|l| l.split_whitespace().all(|v| v == "0")));
    }

    #[test]
    fn single_bucket_lights_one_pixel() {
        let mut map = CoverageBitmap::new();
        // Hit one bucket twice: class 2 at (k mod 256, k div 256).
        let k = crate::fuzzer::bitmap::edge_hash(0x40_1000, 0x40_2000) as usize;
        map.add_edge(0x40_1000, 0x40_2000);
        map.add_edge(0x40_1000, 0x40_2000);
        let mut out = Vec::new();
        heatmap(&map, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let rows: Vec<&str> = text.lines().skip(3).collect();
        let mut nonzero = Vec::new();
        for (y, row) in rows.iter().enumerate() {
            for (x, v) in row.split_whitespace().enumerate() {
                if v != "0" {
                    nonzero.push((x, y, v.to_string()));
                }
            }
        }
        assert_eq!(nonzero, vec![(k % 256, k / 256, "2".to_string())]);
    }
}
