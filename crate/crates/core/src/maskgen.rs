//! BAnG and baseline attention masks, position indices, and the
//! predictor-to-target map.
//!
//! Generation proceeds outward from the anchor pair in the order
//! x_0, x_1, x_{-1}, x_2, x_{-2}, ... and each token's attention row must
//! cover exactly the tokens generated up to the point where that token's
//! own prediction is consumed. The rows below are the transitive closure of
//! that requirement: every key's row is contained in its queries' rows, so
//! no information can leak through stacked attention layers. Concretely,
//! with the anchors written between offsets -1 and 0:
//!
//! * `<ancr>` attends itself only (it predicts x_0 from a blank context);
//! * x_0 attends `{<ancr>, x_0}`;
//! * `<ancl>` attends `{<ancl>, <ancr>, x_0, x_1}` (its prediction of
//!   x_{-1} conditions on the first two right tokens);
//! * right token x_j (j >= 1) attends `{<ancl>, <ancr>} ∪ [x_{-(j-1)}, x_j]`;
//! * left token x_{-j} attends `{<ancl>, <ancr>} ∪ [x_{-j}, x_{j+1}]`;
//!
//! all windows clipped to existing tokens. Terminal eos tokens occupy the
//! outermost left/right offsets and follow the same formulas.

use ndarray::Array2;
use std::fmt::Write as _;

use crate::seqcore::{AnchoredSeq, TOK_EOS, TOK_PAD};

/// Boolean query-by-key attention mask; `allowed[q][k]` is true iff query
/// `q` may attend key `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    allowed: Array2<bool>,
}

impl AttentionMask {
    pub fn from_fn(l: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        AttentionMask {
            allowed: Array2::from_shape_fn((l, l), |(q, k)| f(q, k)),
        }
    }

    pub fn len(&self) -> usize {
        self.allowed.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[(q, k)]
    }

    pub fn row(&self, q: usize) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.allowed[(q, k)]).collect()
    }

    pub fn matrix(&self) -> &Array2<bool> {
        &self.allowed
    }

    /// ASCII rendering: header `L=<n> anchors=<i>,<j>`, then one line per
    /// query row with `#` for allowed and `.` for disallowed.
    pub fn ascii(&self, anchors: Option<(usize, usize)>) -> String {
        let l = self.len();
        let mut out = String::new();
        match anchors {
            Some((i, j)) => writeln!(out, "L={l} anchors={i},{j}").unwrap(),
            None => writeln!(out, "L={l} anchors=-").unwrap(),
        }
        for q in 0..l {
            for k in 0..l {
                out.push(if self.allowed[(q, k)] { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }
}

/// Per-token position indices for the two attention families.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionIndices {
    /// Rotary indices for self-attention: non-anchor tokens keep their
    /// pre-insertion consecutive indices, anchors duplicate their flanking
    /// tokens' indices.
    pub rope_idx: Vec<i64>,
    /// Signed cross-attention indices relative to `<ancl>` (which gets 0).
    pub cross_idx: Vec<i64>,
}

/// Predictor position -> target position (None for positions that carry no
/// loss, i.e. eos and pad).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetMap {
    pub targets: Vec<Option<usize>>,
}

impl TargetMap {
    pub fn len(&self) -> usize {
        self.targets.len()
    }
}

/// Build the BAnG attention mask for an anchored sequence.
pub fn bang_mask(seq: &AnchoredSeq) -> AttentionMask {
    let l = seq.len();
    let a = seq.anchor_slot;
    let mut allowed = Array2::from_elem((l, l), false);
    for q in 0..l {
        let (lo, hi) = bang_row_window(l, a, q);
        for k in lo..=hi {
            allowed[(q, k)] = true;
        }
    }
    AttentionMask { allowed }
}

/// Inclusive matrix-index window of the BAnG row for query `q`.
fn bang_row_window(l: usize, a: usize, q: usize) -> (usize, usize) {
    debug_assert!(a + 1 < l && q < l);
    if q == a {
        // <ancl>: anchors plus the first two right tokens.
        (a, (a + 3).min(l - 1))
    } else if q == a + 1 {
        // <ancr>: itself only.
        (a + 1, a + 1)
    } else if q == a + 2 {
        // x_0: <ancr> and itself.
        (a + 1, a + 2)
    } else if q > a + 2 {
        // right token x_j, j >= 1: [x_{-(j-1)}, x_j] plus anchors.
        let j = q - a - 2;
        (a.saturating_sub(j - 1), q)
    } else {
        // left token x_{-j}: [x_{-j}, x_{j+1}] plus anchors.
        let j = a - q;
        (q, (a + 3 + j).min(l - 1))
    }
}

/// Lower-triangular mask for autoregressive baselines.
pub fn causal_mask(l: usize) -> AttentionMask {
    AttentionMask::from_fn(l, |q, k| k <= q)
}

/// Fully visible mask for the iterative baselines; `pad_cols` columns are
/// masked out for every query.
pub fn full_mask(l: usize, pad_cols: &[usize]) -> AttentionMask {
    let mut allowed = Array2::from_elem((l, l), true);
    for &c in pad_cols {
        for q in 0..l {
            allowed[(q, c)] = false;
        }
    }
    AttentionMask { allowed }
}

/// Rotary and cross-attention indices for an anchored sequence.
pub fn position_indices(seq: &AnchoredSeq) -> PositionIndices {
    let l = seq.len();
    let a = seq.anchor_slot;
    let mut rope_idx = vec![0i64; l];
    let mut next = 0i64;
    for (p, idx) in rope_idx.iter_mut().enumerate() {
        if p != a && p != a + 1 {
            *idx = next;
            next += 1;
        }
    }
    // Anchors duplicate flanking indices so non-anchor relative distances
    // are unchanged by the insertion.
    let ancl = if a >= 1 {
        rope_idx[a - 1]
    } else if a + 2 < l {
        rope_idx[a + 2] - 1
    } else {
        0
    };
    let ancr = if a + 2 < l { rope_idx[a + 2] } else { ancl + 1 };
    rope_idx[a] = ancl;
    rope_idx[a + 1] = ancr;

    let cross_idx = (0..l).map(|p| p as i64 - a as i64).collect();
    PositionIndices { rope_idx, cross_idx }
}

/// Predictor-to-target wiring: `<ancr>` predicts x_0, `<ancl>` predicts
/// x_{-1}, and each content token predicts the next one outward on its own
/// side; eos and pad positions predict nothing.
pub fn target_map(seq: &AnchoredSeq) -> TargetMap {
    let l = seq.len();
    let a = seq.anchor_slot;
    let targets = (0..l)
        .map(|p| {
            if p != a && p != a + 1 {
                let tok = seq.tokens[p];
                if tok == TOK_EOS || tok == TOK_PAD {
                    return None;
                }
            }
            if p == a {
                (a >= 1).then(|| a - 1)
            } else if p == a + 1 {
                (a + 2 < l).then_some(a + 2)
            } else if p > a + 1 {
                (p + 1 < l).then_some(p + 1)
            } else {
                (p >= 1).then(|| p - 1)
            }
        })
        .collect();
    TargetMap { targets }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::{insert_anchors, NucKind};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn anchored(m: usize, n: usize) -> AnchoredSeq {
        let tokens: Vec<u32> = (0..m + n).map(|i| (i % 4) as u32).collect();
        let after = if m == 0 { None } else { Some(m - 1) };
        insert_anchors(&tokens, after, NucKind::Rna).unwrap()
    }

    fn anchored_eos(m: usize, n: usize) -> AnchoredSeq {
        anchored(m, n).with_terminal_eos()
    }

    // ------------------------------------------------------------------
    // Independent oracle: generation-order semantics.
    //
    // Tokens are produced in the order x_0, x_1, x_{-1}, x_2, x_{-2}, ...
    // (the right/left alternation of the factorization), with the terminal
    // eos tokens occupying the outermost offsets. The oracle assigns each
    // position a generation rank and derives each row as "everything up to
    // a rank cap": right tokens see up to their own rank, left tokens
    // additionally see the next right token (their prediction conditions on
    // it), <ancl> sees the first two right tokens, <ancr> sees nothing.
    // ------------------------------------------------------------------

    /// Generation rank of matrix position `p` (anchors rank 0).
    fn gen_rank(a: usize, p: usize) -> usize {
        if p == a || p == a + 1 {
            0
        } else if p > a + 1 {
            let i = p - a - 2; // x_i
            if i == 0 {
                1
            } else {
                2 * i
            }
        } else {
            let j = a - p; // x_{-j}
            2 * j + 1
        }
    }

    fn oracle_row(l: usize, a: usize, q: usize) -> BTreeSet<usize> {
        if q == a + 1 {
            return BTreeSet::from([a + 1]);
        }
        let cap: usize = if q == a {
            2
        } else if q > a + 1 {
            let i = q - a - 2;
            if i == 0 {
                1
            } else {
                2 * i
            }
        } else {
            let j = a - q;
            2 * j + 2
        };
        let mut row: BTreeSet<usize> = (0..l)
            .filter(|&k| k != a && k != a + 1 && gen_rank(a, k) <= cap)
            .collect();
        row.insert(a + 1);
        if cap >= 2 {
            // <ancl> is only visible where x_0 and x_1 already are; earlier
            // queries would inherit them through it.
            row.insert(a);
        }
        row
    }

    #[test]
    fn bang_mask_matches_generation_order_oracle() {
        for m in 0..6usize {
            for n in 0..6usize {
                for with_eos in [false, true] {
                    let seq = if with_eos { anchored_eos(m, n) } else { anchored(m, n) };
                    let mask = bang_mask(&seq);
                    let a = seq.anchor_slot;
                    for q in 0..seq.len() {
                        let got: BTreeSet<usize> = mask.row(q).into_iter().collect();
                        let want = oracle_row(seq.len(), a, q);
                        assert_eq!(got, want, "m={m} n={n} eos={with_eos} q={q}");
                    }
                }
            }
        }
    }

    #[test]
    fn bang_mask_small_example_rows() {
        // [x_{-1}, <ancl>, <ancr>, x_0, x_1]
        let seq = anchored(1, 2);
        let mask = bang_mask(&seq);
        assert_eq!(mask.row(0), vec![0, 1, 2, 3, 4]); // x_{-1}: everything
        assert_eq!(mask.row(1), vec![1, 2, 3, 4]); // <ancl>: anchors, x_0, x_1
        assert_eq!(mask.row(2), vec![2]); // <ancr>: itself
        assert_eq!(mask.row(3), vec![2, 3]); // x_0: <ancr> and itself
        assert_eq!(mask.row(4), vec![1, 2, 3, 4]); // x_1
    }

    #[test]
    fn bang_mask_degenerate_anchors_only() {
        let seq = anchored(0, 0);
        let mask = bang_mask(&seq);
        assert_eq!(mask.row(0), vec![0, 1]); // <ancl>
        assert_eq!(mask.row(1), vec![1]); // <ancr>
    }

    /// The central structural property: the mask is transitively closed, so
    /// a representation can never depend on a token outside its own row no
    /// matter how many attention layers are stacked.
    #[test]
    fn bang_mask_is_transitively_closed() {
        for m in 0..7usize {
            for n in 0..7usize {
                let seq = anchored_eos(m, n);
                let mask = bang_mask(&seq);
                for q in 0..seq.len() {
                    let row: BTreeSet<usize> = mask.row(q).into_iter().collect();
                    for &k in &row {
                        let krow: BTreeSet<usize> = mask.row(k).into_iter().collect();
                        assert!(
                            krow.is_subset(&row),
                            "m={m} n={n}: row({k}) not within row({q})"
                        );
                    }
                }
            }
        }
    }

    /// Predictor rows cover exactly the conditioning set of the token they
    /// predict: the generation-order prefix strictly before the target
    /// (plus anchors). Brute-force over all predictors for L <= 12.
    #[test]
    fn target_conditioning_matches_factorization() {
        for m in 0..5usize {
            for n in 0..5usize {
                let seq = anchored_eos(m, n);
                let a = seq.anchor_slot;
                let mask = bang_mask(&seq);
                let tm = target_map(&seq);
                for p in 0..seq.len() {
                    let Some(t) = tm.targets[p] else { continue };
                    let trank = gen_rank(a, t);
                    let conditioning: BTreeSet<usize> = (0..seq.len())
                        .filter(|&k| k != a && k != a + 1 && gen_rank(a, k) < trank)
                        .collect();
                    let row: BTreeSet<usize> = mask
                        .row(p)
                        .into_iter()
                        .filter(|&k| k != a && k != a + 1 && k != p)
                        .collect();
                    // row (minus anchors and self) must stay within the
                    // conditioning set...
                    assert!(
                        row.is_subset(&conditioning),
                        "m={m} n={n} p={p}: over-conditioned"
                    );
                    // ...and may fall short by at most the single
                    // most-recent opposite-side token (right-chain
                    // predictions drop x_{-j} to stay leak-free).
                    let missing: Vec<usize> =
                        conditioning.difference(&row).copied().filter(|&k| k != p).collect();
                    assert!(
                        missing.len() <= 1,
                        "m={m} n={n} p={p}: missing {missing:?}"
                    );
                    if p == a || p < a || p == a + 1 {
                        // left-chain and anchor predictions are exact
                        assert!(missing.is_empty(), "m={m} n={n} p={p}: left chain must be exact");
                    }
                }
            }
        }
    }

    #[test]
    fn causal_mask_shape() {
        let m1 = causal_mask(1);
        assert!(m1.allowed(0, 0));
        let m3 = causal_mask(3);
        for q in 0..3 {
            for k in 0..3 {
                assert_eq!(m3.allowed(q, k), k <= q);
            }
        }
        // row sums 1..L
        for q in 0..3 {
            assert_eq!(m3.row(q).len(), q + 1);
        }
    }

    /// Causal mask + next-token target shift reproduces standard
    /// autoregressive conditioning: enumerate directly for short lengths.
    #[test]
    fn causal_mask_matches_autoregressive_enumeration() {
        for l in 1..=6usize {
            let mask = causal_mask(l);
            for q in 0..l {
                // predictor at q emits token q+1, whose conditioning set is
                // exactly the prefix 0..=q
                let expect: Vec<usize> = (0..=q).collect();
                assert_eq!(mask.row(q), expect);
            }
        }
    }

    #[test]
    fn full_mask_with_pads() {
        let m = full_mask(2, &[]);
        assert_eq!(m.row(0), vec![0, 1]);
        let mp = full_mask(3, &[2]);
        for q in 0..3 {
            assert_eq!(mp.row(q), vec![0, 1]);
        }
    }

    #[test]
    fn position_indices_example() {
        // [x_{-1}, <ancl>, <ancr>, x_0]
        let seq = anchored(1, 1);
        let seq = AnchoredSeq {
            tokens: seq.tokens[..4].to_vec(),
            anchor_slot: 1,
            side: seq.side[..4].to_vec(),
            kind_flag: NucKind::Rna,
        };
        let idx = position_indices(&seq);
        assert_eq!(idx.rope_idx, vec![0, 0, 1, 1]);
        assert_eq!(idx.cross_idx, vec![-1, 0, 1, 2]);
    }

    #[test]
    fn position_indices_anchors_at_start() {
        let seq = anchored(0, 2);
        let idx = position_indices(&seq);
        assert_eq!(idx.rope_idx[0], idx.rope_idx[1] - 1);
        assert_eq!(idx.rope_idx, vec![-1, 0, 0, 1]);
    }

    #[test]
    fn rope_distances_preserved() {
        let seq = anchored(2, 2); // [x_{-2}, x_{-1}, ancl, ancr, x_0, x_1]
        let idx = position_indices(&seq);
        // distance between x_1 and x_{-1} is unchanged by anchor insertion
        assert_eq!(idx.rope_idx[5] - idx.rope_idx[1], 2);
    }

    #[test]
    fn target_map_example() {
        // [eosL, x_{-1}, ancl, ancr, x_0, x_1, eosR]
        let seq = anchored_eos(1, 2);
        let seq6 = AnchoredSeq {
            tokens: {
                let mut t = seq.tokens.clone();
                t.truncate(7);
                *t.last_mut().unwrap() = TOK_EOS;
                t
            },
            anchor_slot: 2,
            side: seq.side[..7].to_vec(),
            kind_flag: NucKind::Rna,
        };
        let tm = target_map(&seq6);
        assert_eq!(
            tm.targets,
            vec![None, Some(0), Some(1), Some(4), Some(5), Some(6), None]
        );
    }

    #[test]
    fn target_map_empty_sides() {
        let seq = anchored_eos(0, 0); // [eosL, ancl, ancr, eosR]
        let tm = target_map(&seq);
        assert_eq!(tm.targets, vec![None, Some(0), Some(3), None]);
    }

    #[test]
    fn ascii_rendering() {
        let seq = anchored(0, 0);
        let mask = bang_mask(&seq);
        let s = mask.ascii(Some((0, 1)));
        assert_eq!(s, "L=2 anchors=0,1\n##\n.#\n");
    }

    proptest! {
        /// Every content token appears exactly once as a target, plus both
        /// terminal eos tokens.
        #[test]
        fn targets_cover_content_once(m in 0usize..8, n in 0usize..8) {
            let seq = anchored_eos(m, n);
            let tm = target_map(&seq);
            let mut seen = vec![0usize; seq.len()];
            for t in tm.targets.iter().flatten() {
                seen[*t] += 1;
            }
            let a = seq.anchor_slot;
            for p in 0..seq.len() {
                if p == a || p == a + 1 {
                    prop_assert_eq!(seen[p], 0);
                } else {
                    prop_assert_eq!(seen[p], 1, "position {} covered {} times", p, seen[p]);
                }
            }
        }

        /// Rows are nonempty contiguous windows, nested outward along the
        /// generation order.
        #[test]
        fn bang_rows_are_contiguous_nested_windows(m in 0usize..9, n in 0usize..9) {
            let seq = anchored_eos(m, n);
            let mask = bang_mask(&seq);
            let a = seq.anchor_slot;
            let mut ranked: Vec<usize> = (0..seq.len()).collect();
            ranked.sort_by_key(|&p| (gen_rank(a, p), p));
            let mut prev: Option<BTreeSet<usize>> = None;
            for &p in &ranked {
                let row = mask.row(p);
                prop_assert!(!row.is_empty());
                // contiguous
                for w in row.windows(2) {
                    prop_assert_eq!(w[1], w[0] + 1);
                }
                // anchors present in every row past the first right token
                if gen_rank(a, p) >= 2 {
                    prop_assert!(row.contains(&a) && row.contains(&(a + 1)));
                }
                let set: BTreeSet<usize> = row.into_iter().collect();
                if let Some(prev) = &prev {
                    if gen_rank(a, p) > 0 {
                        prop_assert!(prev.is_subset(&set));
                    }
                }
                prev = Some(set);
            }
        }

        #[test]
        fn rope_indices_consecutive_for_non_anchors(m in 0usize..8, n in 0usize..8) {
            let seq = anchored_eos(m, n);
            let idx = position_indices(&seq);
            let a = seq.anchor_slot;
            let non_anchor: Vec<i64> = (0..seq.len())
                .filter(|&p| p != a && p != a + 1)
                .map(|p| idx.rope_idx[p])
                .collect();
            let expect: Vec<i64> = (0..non_anchor.len() as i64).collect();
            prop_assert_eq!(non_anchor, expect);
            prop_assert_eq!(idx.cross_idx[a], 0);
            prop_assert_eq!(idx.cross_idx[a + 1], 1);
        }
    }

}
