use serde::{Deserialize, Serialize};

use super::SharingError;

/// Per-stage tied-layer counts `(L_1, …, L_M)` for a depth-`L` model.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct StagePlan {
    sizes: Vec<usize>,
}

impl TryFrom<Vec<usize>> for StagePlan {
    type Error = SharingError;

    fn try_from(sizes: Vec<usize>) -> Result<Self, Self::Error> {
        custom_plan(&sizes)
    }
}

impl From<StagePlan> for Vec<usize> {
    fn from(plan: StagePlan) -> Self {
        plan.sizes
    }
}

impl StagePlan {
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Number of stages M.
    pub fn stages(&self) -> usize {
        self.sizes.len()
    }

    /// Total depth L.
    pub fn depth(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Stage index (0-based) of every layer position.
    pub fn position_map(&self) -> Vec<usize> {
        self.sizes
            .iter()
            .enumerate()
            .flat_map(|(m, &n)| std::iter::repeat_n(m, n))
            .collect()
    }

    /// Positions `[start, end)` covered by stage `m`.
    pub fn stage_range(&self, m: usize) -> std::ops::Range<usize> {
        let start: usize = self.sizes[..m].iter().sum();
        start..start + self.sizes[m]
    }

    /// One layer per stage: the plan of an untied model.
    pub fn untied(depth: usize) -> Result<Self, SharingError> {
        custom_plan(&vec![1; depth])
    }
}

/// Validated plan from explicit sizes; unbalanced plans are allowed.
pub fn custom_plan(sizes: &[usize]) -> Result<StagePlan, SharingError> {
    if sizes.is_empty() {
        return Err(SharingError::InvalidPlan("plan has no stages".into()));
    }
    if let Some(pos) = sizes.iter().position(|&s| s == 0) {
        return Err(SharingError::InvalidPlan(format!(
            "stage {} has size 0 in {sizes:?}",
            pos + 1
        )));
    }
    Ok(StagePlan {
        sizes: sizes.to_vec(),
    })
}

/// `floor(L/M)` layers per stage; the `L mod M` extra layers go one each to
/// stages in center-out order (middle first, then alternating outward,
/// front-most first on ties).
pub fn balanced_plan(depth: usize, stages: usize) -> Result<StagePlan, SharingError> {
    if stages == 0 || stages > depth {
        return Err(SharingError::InvalidPlan(format!(
            "need 1 <= M <= L, got L={depth}, M={stages}"
        )));
    }
    let mut sizes = vec![depth / stages; stages];
    let mut order: Vec<usize> = (0..stages).collect();
    order.sort_by_key(|&i| ((2 * i).abs_diff(stages - 1), i));
    for &m in order.iter().take(depth % stages) {
        sizes[m] += 1;
    }
    custom_plan(&sizes)
}
