//! Visual-anchor selection: a progressive per-head top-k walk over the
//! [CLS] attention map. Heads are visited in order, each contributes its
//! share of the budget from its own descending-score ordering, and indices
//! already taken are skipped.

use crate::connector::FeatureMap;
use crate::error::{Error, Result};
use crate::kernel::Matrix;

/// Last-layer [CLS] attention with the CLS column excluded: one row per
/// head, one column per visual token.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    weights: Matrix,
}

impl AttentionMap {
    pub fn new(weights: Matrix) -> Result<AttentionMap> {
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(Error::data("attention map needs at least one head and one token"));
        }
        if !weights.is_finite() {
            return Err(Error::data("attention map contains non-finite weights"));
        }
        if weights.as_slice().iter().any(|&v| v < 0.0) {
            return Err(Error::data("attention map contains negative weights"));
        }
        Ok(AttentionMap { weights })
    }

    /// Constructor for rows taken straight out of a softmax: additionally
    /// checks that no head row sums above one.
    pub fn from_raw_softmax(weights: Matrix) -> Result<AttentionMap> {
        for r in 0..weights.rows() {
            let sum: f64 = weights.row(r).iter().sum();
            if sum > 1.0 + 1e-6 {
                return Err(Error::data(format!(
                    "head {r} row sums to {sum}, above 1 for a softmax source"
                )));
            }
        }
        AttentionMap::new(weights)
    }

    pub fn heads(&self) -> usize {
        self.weights.rows()
    }

    pub fn visual_tokens(&self) -> usize {
        self.weights.cols()
    }

    pub fn head_row(&self, h: usize) -> &[f64] {
        self.weights.row(h)
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    /// Column mean over heads; the salience score used by the analysis side.
    pub fn mean_row(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.visual_tokens()];
        for h in 0..self.heads() {
            for (m, &v) in mean.iter_mut().zip(self.head_row(h)) {
                *m += v;
            }
        }
        let inv = 1.0 / self.heads() as f64;
        for m in mean.iter_mut() {
            *m *= inv;
        }
        mean
    }
}

/// Ordered, duplicate-free full-sequence token indices; position 0 is
/// always the [CLS] token (index 0), visual patch j appears as j + 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorIndexList {
    indices: Vec<usize>,
}

impl AnchorIndexList {
    /// Validates CLS-first, uniqueness and range over a sequence of
    /// `total_tokens` entries (CLS + visual).
    pub fn new(indices: Vec<usize>, total_tokens: usize) -> Result<AnchorIndexList> {
        if indices.first() != Some(&0) {
            return Err(Error::data("anchor list must start with index 0"));
        }
        let mut seen = vec![false; total_tokens];
        for &idx in &indices {
            if idx >= total_tokens {
                return Err(Error::data(format!(
                    "anchor index {idx} out of range for {total_tokens} tokens"
                )));
            }
            if seen[idx] {
                return Err(Error::data(format!("duplicate anchor index {idx}")));
            }
            seen[idx] = true;
        }
        Ok(AnchorIndexList { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// How many anchors to pick on top of the always-included [CLS] token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionBudget {
    pub t_n: usize,
}

impl SelectionBudget {
    pub fn new(t_n: usize) -> SelectionBudget {
        SelectionBudget { t_n }
    }
}

/// Head h's share of the budget: the first `t_n mod H` heads take one extra.
fn head_quota(t_n: usize, heads: usize, h: usize) -> usize {
    t_n / heads + usize::from(h < t_n % heads)
}

fn check_budget(attn: &AttentionMap, budget: SelectionBudget) -> Result<()> {
    if budget.t_n > attn.visual_tokens() {
        return Err(Error::config(format!(
            "budget {} exceeds {} available visual tokens",
            budget.t_n,
            attn.visual_tokens()
        )));
    }
    Ok(())
}

/// Progressive per-head top-k search. Within a head, candidates are ordered
/// by score descending with ties broken by ascending index; indices already
/// selected are skipped. Selected visual index j is recorded as j + 1.
pub fn select_anchors(attn: &AttentionMap, budget: SelectionBudget) -> Result<AnchorIndexList> {
    check_budget(attn, budget)?;
    let n = attn.visual_tokens();
    let heads = attn.heads();
    let mut taken = vec![false; n];
    let mut selected = Vec::with_capacity(budget.t_n + 1);
    selected.push(0usize);

    let mut carry = 0usize;
    for h in 0..heads {
        let mut want = head_quota(budget.t_n, heads, h) + carry;
        carry = 0;
        if want == 0 {
            continue;
        }
        let row = attn.head_row(h);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_unstable_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b))
        });
        for idx in order {
            if want == 0 {
                break;
            }
            if !taken[idx] {
                taken[idx] = true;
                selected.push(idx + 1);
                want -= 1;
            }
        }
        carry = want;
    }

    // Unreachable while t_n <= visual tokens: every head walks its full
    // ordering, so it can always meet its quota. Kept so the budget is met
    // even if quotas ever exceed what a head can supply.
    if carry > 0 {
        let mean = attn.mean_row();
        let mut order: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
        order.sort_unstable_by(|&a, &b| {
            mean[b].partial_cmp(&mean[a]).unwrap().then(a.cmp(&b))
        });
        for idx in order.into_iter().take(carry) {
            taken[idx] = true;
            selected.push(idx + 1);
        }
    }

    AnchorIndexList::new(selected, n + 1)
}

/// Reference implementation of the same contract: a deliberately naive
/// walk using a full stable sort per head and a linear duplicate scan over
/// the list built so far. Used to cross-check `select_anchors`.
pub fn selection_oracle(attn: &AttentionMap, budget: SelectionBudget) -> Result<AnchorIndexList> {
    check_budget(attn, budget)?;
    let n = attn.visual_tokens();
    let heads = attn.heads();
    let mut list: Vec<usize> = vec![0];

    let mut deficit = 0usize;
    for h in 0..heads {
        let quota = head_quota(budget.t_n, heads, h) + deficit;
        let mut scored: Vec<(f64, usize)> =
            attn.head_row(h).iter().cloned().zip(0..n).collect();
        // stable sort on the score alone; equal scores keep ascending order
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut got = 0usize;
        for (_, idx) in scored {
            if got == quota {
                break;
            }
            let seq = idx + 1;
            if !list.contains(&seq) {
                list.push(seq);
                got += 1;
            }
        }
        deficit = quota - got;
    }

    if deficit > 0 {
        let mean = attn.mean_row();
        let mut scored: Vec<(f64, usize)> = mean.iter().cloned().zip(0..n).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        for (_, idx) in scored {
            if deficit == 0 {
                break;
            }
            let seq = idx + 1;
            if !list.contains(&seq) {
                list.push(seq);
                deficit -= 1;
            }
        }
    }

    AnchorIndexList::new(list, n + 1)
}

/// Rows of the feature map at the anchor positions, in anchor order.
pub fn gather_anchors(features: &FeatureMap, anchors: &AnchorIndexList) -> Result<Matrix> {
    features.matrix().gather_rows(anchors.indices())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attn_from(rows: &[&[f64]]) -> AttentionMap {
        let h = rows.len();
        let n = rows[0].len();
        AttentionMap::new(Matrix::from_fn(h, n, |r, c| rows[r][c])).unwrap()
    }

    #[test]
    fn cls_only_for_zero_budget() {
        let attn = attn_from(&[&[0.4, 0.1, 0.5]]);
        let list = select_anchors(&attn, SelectionBudget::new(0)).unwrap();
        assert_eq!(list.indices(), &[0]);
        let oracle = selection_oracle(&attn, SelectionBudget::new(0)).unwrap();
        assert_eq!(list, oracle);
    }

    #[test]
    fn single_head_exhaustive_budget_sorts_by_attention() {
        let attn = attn_from(&[&[0.1, 0.4, 0.2, 0.3]]);
        let list = select_anchors(&attn, SelectionBudget::new(4)).unwrap();
        assert_eq!(list.indices(), &[0, 2, 4, 3, 1]);
    }

    #[test]
    fn two_head_worked_example() {
        let attn = attn_from(&[
            &[0.10, 0.50, 0.20, 0.05, 0.10, 0.05],
            &[0.30, 0.50, 0.05, 0.05, 0.05, 0.05],
        ]);
        let budget = SelectionBudget::new(2);
        let list = select_anchors(&attn, budget).unwrap();
        assert_eq!(list.indices(), &[0, 2, 1]);
        assert_eq!(selection_oracle(&attn, budget).unwrap(), list);
    }

    #[test]
    fn budget_above_available_is_config_error() {
        let attn = attn_from(&[&[0.5, 0.5]]);
        assert!(matches!(
            select_anchors(&attn, SelectionBudget::new(3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn non_finite_weights_rejected_at_construction() {
        let m = Matrix::from_vec(1, 3, vec![0.1, f64::NAN, 0.2]).unwrap();
        assert!(matches!(AttentionMap::new(m), Err(Error::Data(_))));
        let neg = Matrix::from_vec(1, 3, vec![0.1, -0.2, 0.2]).unwrap();
        assert!(matches!(AttentionMap::new(neg), Err(Error::Data(_))));
    }

    #[test]
    fn raw_softmax_row_sum_check() {
        let over = Matrix::from_vec(1, 3, vec![0.5, 0.5, 0.5]).unwrap();
        assert!(AttentionMap::from_raw_softmax(over).is_err());
        let ok = Matrix::from_vec(1, 3, vec![0.2, 0.3, 0.5]).unwrap();
        assert!(AttentionMap::from_raw_softmax(ok).is_ok());
    }

    #[test]
    fn per_head_scale_invariance() {
        let attn = attn_from(&[
            &[0.10, 0.50, 0.20, 0.05, 0.10, 0.05],
            &[0.30, 0.50, 0.05, 0.05, 0.05, 0.05],
        ]);
        let scaled = attn_from(&[
            &[1.0, 5.0, 2.0, 0.5, 1.0, 0.5],
            &[0.006, 0.010, 0.001, 0.001, 0.001, 0.001],
        ]);
        for t_n in 0..=6 {
            let budget = SelectionBudget::new(t_n);
            assert_eq!(
                select_anchors(&attn, budget).unwrap(),
                select_anchors(&scaled, budget).unwrap()
            );
        }
    }

    #[test]
    fn anchor_list_invariants_enforced() {
        assert!(AnchorIndexList::new(vec![1, 0], 4).is_err());
        assert!(AnchorIndexList::new(vec![0, 2, 2], 4).is_err());
        assert!(AnchorIndexList::new(vec![0, 4], 4).is_err());
        assert!(AnchorIndexList::new(vec![0, 3, 1], 4).is_ok());
    }

    #[test]
    fn gather_matches_row_lookup() {
        let fm = FeatureMap::new(Matrix::from_fn(7, 3, |r, c| (r * 10 + c) as f64)).unwrap();
        let anchors = AnchorIndexList::new(vec![0, 2, 1], 7).unwrap();
        let g = gather_anchors(&fm, &anchors).unwrap();
        assert_eq!(g.rows(), 3);
        assert_eq!(g.row(0), fm.matrix().row(0));
        assert_eq!(g.row(1), fm.matrix().row(2));
        assert_eq!(g.row(2), fm.matrix().row(1));
        // CLS-only gather is the CLS row
        let cls = AnchorIndexList::new(vec![0], 7).unwrap();
        let g = gather_anchors(&fm, &cls).unwrap();
        assert_eq!(g.rows(), 1);
        assert_eq!(g.row(0), fm.matrix().row(0));
    }
}
