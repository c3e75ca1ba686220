//! Depth expansion: initializing untied descendants of any depth from the
//! layers of a learngene pack.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SplitMix64;
use crate::diffcore::Real;
use crate::sharing::{LearngenePack, Provenance, SharingError, StagePlan};
use crate::vit::{init_head, ModelParams, VitError};

#[derive(Debug, thiserror::Error)]
pub enum ExpandError {
    #[error("invalid descendant spec: {0}")]
    InvalidSpec(String),
    #[error("descendant has {want} classes but the pack head has {have}; head re-initialization not permitted")]
    ClassMismatch { have: usize, want: usize },
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    Vit(#[from] VitError),
}

/// Region of the stage sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Front,
    Mid,
    Last,
}

impl Group {
    fn label(self) -> &'static str {
        match self {
            Group::Front => "front",
            Group::Mid => "mid",
            Group::Last => "last",
        }
    }
}

/// Priority over front/mid/last for placing extra descendant layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct InitOrder {
    priority: [Group; 3],
}

impl InitOrder {
    pub const FRONT_MID_LAST: InitOrder = InitOrder {
        priority: [Group::Front, Group::Mid, Group::Last],
    };

    pub fn new(priority: [Group; 3]) -> Result<Self, ExpandError> {
        let distinct = priority[0] != priority[1] && priority[1] != priority[2] && priority[0] != priority[2];
        if !distinct {
            return Err(ExpandError::InvalidSpec(format!(
                "order must name front, mid and last once each, got {priority:?}"
            )));
        }
        Ok(Self { priority })
    }

    pub fn priority(&self) -> [Group; 3] {
        self.priority
    }

    /// All six orders.
    pub fn all() -> Vec<InitOrder> {
        use Group::*;
        [
            [Front, Mid, Last],
            [Front, Last, Mid],
            [Mid, Front, Last],
            [Mid, Last, Front],
            [Last, Front, Mid],
            [Last, Mid, Front],
        ]
        .into_iter()
        .map(|p| InitOrder { priority: p })
        .collect()
    }
}

impl Default for InitOrder {
    fn default() -> Self {
        Self::FRONT_MID_LAST
    }
}

impl fmt::Display for InitOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.priority;
        write!(f, "{}-{}-{}", a.label(), b.label(), c.label())
    }
}

impl FromStr for InitOrder {
    type Err = ExpandError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let groups: Vec<Group> = s
            .split('-')
            .map(|part| match part.trim().to_ascii_lowercase().as_str() {
                "front" => Ok(Group::Front),
                "mid" => Ok(Group::Mid),
                "last" => Ok(Group::Last),
                other => Err(ExpandError::InvalidSpec(format!("unknown group {other:?}"))),
            })
            .collect::<Result<_, _>>()?;
        let priority: [Group; 3] = groups
            .try_into()
            .map_err(|_| ExpandError::InvalidSpec(format!("order {s:?} must have three groups")))?;
        InitOrder::new(priority)
    }
}

impl TryFrom<String> for InitOrder {
    type Error = ExpandError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<InitOrder> for String {
    fn from(o: InitOrder) -> Self {
        o.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Stage `m`'s descendant positions all copy learngene `m`.
    CyclicContiguous,
    /// Position `i` copies learngene `i mod M`.
    CyclicRoundrobin,
    /// Each position copies a learngene drawn from a seeded SplitMix64 stream.
    Random,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::CyclicContiguous => "cyclic-contiguous",
            Strategy::CyclicRoundrobin => "cyclic-roundrobin",
            Strategy::Random => "random",
        })
    }
}

impl FromStr for Strategy {
    type Err = ExpandError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cyclic-contiguous" | "cyclic" => Ok(Strategy::CyclicContiguous),
            "cyclic-roundrobin" | "roundrobin" => Ok(Strategy::CyclicRoundrobin),
            "random" => Ok(Strategy::Random),
            other => Err(ExpandError::InvalidSpec(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescendantSpec {
    pub depth: usize,
    pub strategy: Strategy,
    #[serde(default)]
    pub order: InitOrder,
    #[serde(default)]
    pub seed: u64,
    /// Head size; `None` keeps the pack's.
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub allow_head_reinit: bool,
}

impl DescendantSpec {
    pub fn new(depth: usize, strategy: Strategy) -> Self {
        Self {
            depth,
            strategy,
            order: InitOrder::default(),
            seed: 0,
            classes: None,
            allow_head_reinit: false,
        }
    }

    pub fn with_order(mut self, order: InitOrder) -> Self {
        self.order = order;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_classes(mut self, classes: usize, allow_head_reinit: bool) -> Self {
        self.classes = Some(classes);
        self.allow_head_reinit = allow_head_reinit;
        self
    }
}

/// Stage indices (0-based) in group-priority order. Front is the first
/// `ceil(M/3)` stages, last the final `ceil(M/3)` stages not already in
/// front, mid the rest; ascending within a group.
pub fn priority_sequence(stages: usize, order: InitOrder) -> Vec<usize> {
    let k = stages.div_ceil(3);
    let front = 0..k.min(stages);
    let last = stages.saturating_sub(k).max(k.min(stages))..stages;
    let mid = front.end..last.start;
    order
        .priority()
        .iter()
        .flat_map(|g| match g {
            Group::Front => front.clone(),
            Group::Mid => mid.clone(),
            Group::Last => last.clone(),
        })
        .collect()
}

/// Layers per stage for a depth-`depth` descendant.
///
/// Stage `m` gets `max(1, floor(depth·L_m / L))`. The leftover is handed out
/// one per stage along [`priority_sequence`]. When the minimum of one pushes
/// the total above `depth`, the excess is removed one per stage in reverse
/// priority from stages holding more than one layer.
pub fn stage_partition(depth: usize, plan: &StagePlan, order: InitOrder) -> Result<Vec<usize>, ExpandError> {
    let m = plan.stages();
    if depth < m {
        return Err(ExpandError::InvalidSpec(format!(
            "depth {depth} is below the {m} stages of the pack"
        )));
    }
    let total = plan.depth();
    let mut counts: Vec<usize> = plan
        .sizes()
        .iter()
        .map(|&l| (depth * l / total).max(1))
        .collect();
    let seq = priority_sequence(m, order);
    let assigned: usize = counts.iter().sum();
    if assigned <= depth {
        for &s in seq.iter().cycle().take(depth - assigned) {
            counts[s] += 1;
        }
    } else {
        let mut excess = assigned - depth;
        while excess > 0 {
            for &s in seq.iter().rev() {
                if excess > 0 && counts[s] > 1 {
                    counts[s] -= 1;
                    excess -= 1;
                }
            }
        }
    }
    debug_assert_eq!(counts.iter().sum::<usize>(), depth);
    Ok(counts)
}

/// Learngene index (0-based) for each descendant position.
pub fn assignment(plan: &StagePlan, spec: &DescendantSpec) -> Result<Vec<usize>, ExpandError> {
    if spec.depth == 0 {
        return Err(ExpandError::InvalidSpec("descendant depth must be >= 1".into()));
    }
    let m = plan.stages();
    Ok(match spec.strategy {
        Strategy::CyclicContiguous => stage_partition(spec.depth, plan, spec.order)?
            .into_iter()
            .enumerate()
            .flat_map(|(stage, n)| std::iter::repeat_n(stage, n))
            .collect(),
        Strategy::CyclicRoundrobin => (0..spec.depth).map(|i| i % m).collect(),
        Strategy::Random => {
            let mut rng = SplitMix64::new(spec.seed);
            (0..spec.depth).map(|_| rng.next_index(m)).collect()
        }
    })
}

/// `(position, learngene_index)` pairs, both 1-based, exactly as
/// [`init_descendant`] realizes them.
pub fn assignment_report<T: Real>(
    pack: &LearngenePack<T>,
    spec: &DescendantSpec,
) -> Result<Vec<(usize, usize)>, ExpandError> {
    Ok(assignment(pack.plan(), spec)?
        .into_iter()
        .enumerate()
        .map(|(i, j)| (i + 1, j + 1))
        .collect())
}

/// CSV with header `position,learngene_index`.
pub fn report_csv(report: &[(usize, usize)]) -> String {
    let mut out = String::from("position,learngene_index\n");
    for (p, j) in report {
        out.push_str(&format!("{p},{j}\n"));
    }
    out
}

/// Untied descendant: every position owns a deep copy of its assigned
/// learngene; patch embedding, tokens, positional table and final norm are
/// copied from the pack. The head is copied when class counts agree and
/// re-initialized from `spec.seed` otherwise (if permitted).
pub fn init_descendant<T: Real>(pack: &LearngenePack<T>, spec: &DescendantSpec) -> Result<ModelParams<T>, ExpandError> {
    let map = assignment(pack.plan(), spec)?;
    let have = pack.config().classes;
    let want = spec.classes.unwrap_or(have);
    if want == 0 {
        return Err(ExpandError::InvalidSpec("classes must be >= 1".into()));
    }
    let mut shared = pack.shared().clone();
    if want != have {
        if !spec.allow_head_reinit {
            return Err(ExpandError::ClassMismatch { have, want });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (w, b) = init_head(pack.config().width, want, &mut rng);
        shared.head_weight = w;
        shared.head_bias = b;
    }
    let mut config = pack.config().with_depth(spec.depth);
    config.classes = want;
    let layers = map.iter().map(|&j| pack.layers()[j].clone()).collect();
    Ok(ModelParams::from_parts(
        config,
        shared,
        layers,
        (0..spec.depth).collect(),
        None,
    )?)
}

/// Simple-LG baseline: the layers of a normally trained untied model act as
/// pseudo-learngenes, one stage each, and go through the same expansion.
pub fn simple_lg_expand<T: Real>(
    vanilla: &ModelParams<T>,
    depth: usize,
    strategy: Strategy,
    order: InitOrder,
    seed: u64,
) -> Result<ModelParams<T>, ExpandError> {
    let pack = LearngenePack::from_vanilla(
        vanilla,
        Provenance {
            source: "vanilla".into(),
            ..Provenance::default()
        },
    )?;
    let spec = DescendantSpec::new(depth, strategy).with_order(order).with_seed(seed);
    init_descendant(&pack, &spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharing::{balanced_plan, custom_plan};

    #[test]
    fn order_parsing() {
        let o: InitOrder = "front-last-mid".parse().unwrap();
        assert_eq!(o.priority(), [Group::Front, Group::Last, Group::Mid]);
        assert_eq!(o.to_string(), "front-last-mid");
        assert!("front-front-mid".parse::<InitOrder>().is_err());
        assert!("front-mid".parse::<InitOrder>().is_err());
        assert_eq!(InitOrder::all().len(), 6);
    }

    #[test]
    fn priority_groups_small_stage_counts() {
        let fml = InitOrder::FRONT_MID_LAST;
        assert_eq!(priority_sequence(1, fml), vec![0]);
        assert_eq!(priority_sequence(2, fml), vec![0, 1]);
        assert_eq!(priority_sequence(3, fml), vec![0, 1, 2]);
        assert_eq!(priority_sequence(5, fml), vec![0, 1, 2, 3, 4]);
        let lmf: InitOrder = "last-mid-front".parse().unwrap();
        assert_eq!(priority_sequence(5, lmf), vec![3, 4, 2, 0, 1]);
        assert_eq!(priority_sequence(4, lmf), vec![2, 3, 0, 1]);
        let mfl: InitOrder = "mid-front-last".parse().unwrap();
        assert_eq!(priority_sequence(7, mfl), vec![3, 0, 1, 2, 4, 5, 6]);
    }

    #[test]
    fn partition_examples() {
        let plan = balanced_plan(16, 5).unwrap();
        let fml = InitOrder::FRONT_MID_LAST;
        assert_eq!(stage_partition(16, &plan, fml).unwrap(), vec![3, 3, 4, 3, 3]);
        assert_eq!(stage_partition(12, &plan, fml).unwrap(), vec![3, 2, 3, 2, 2]);
        assert!(stage_partition(4, &plan, fml).is_err());
    }

    #[test]
    fn partition_excess_from_minimum_is_trimmed() {
        let plan = custom_plan(&[1, 1, 6]).unwrap();
        let p = stage_partition(3, &plan, InitOrder::FRONT_MID_LAST).unwrap();
        assert_eq!(p, vec![1, 1, 1]);
        let p = stage_partition(4, &plan, InitOrder::FRONT_MID_LAST).unwrap();
        assert_eq!(p, vec![1, 1, 2]);
    }

    #[test]
    fn roundrobin_and_contiguous_assignments() {
        let plan = custom_plan(&[1, 1, 1]).unwrap();
        let spec = DescendantSpec::new(5, Strategy::CyclicRoundrobin);
        assert_eq!(assignment(&plan, &spec).unwrap(), vec![0, 1, 2, 0, 1]);
        let plan = balanced_plan(16, 5).unwrap();
        let spec = DescendantSpec::new(16, Strategy::CyclicContiguous);
        let one_based: Vec<usize> = assignment(&plan, &spec).unwrap().iter().map(|j| j + 1).collect();
        assert_eq!(one_based, vec![1, 1, 1, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 5, 5, 5]);
    }

    #[test]
    fn random_assignment_is_seeded() {
        let plan = balanced_plan(16, 5).unwrap();
        let spec = DescendantSpec::new(12, Strategy::Random).with_seed(3);
        let a = assignment(&plan, &spec).unwrap();
        assert_eq!(a, assignment(&plan, &spec).unwrap());
        assert!(a.iter().all(|&j| j < 5));
        let b = assignment(&plan, &spec.clone().with_seed(4)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn csv_header() {
        assert_eq!(report_csv(&[(1, 2)]), "position,learngene_index\n1,2\n");
    }
}
