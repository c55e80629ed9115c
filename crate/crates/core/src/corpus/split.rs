use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Source};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2, test: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default)]
    pub ratios: SplitRatios,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_folds() -> usize {
    5
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { ratios: SplitRatios::default(), folds: default_folds(), seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let r = self.ratios;
        if !(r.train > 0.0 && r.val > 0.0 && r.test > 0.0) {
            return Err(Error::InvalidConfig("split ratios must be positive".into()));
        }
        if ((r.train + r.val + r.test) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("split ratios must sum to 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig("folds must be at least 2".into()));
        }
        Ok(())
    }
}

/// Sample indices into the source dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partition {
    pub fn datasets(&self, ds: &Dataset) -> (Dataset, Dataset, Dataset) {
        (ds.subset(&self.train), ds.subset(&self.val), ds.subset(&self.test))
    }
}

/// One cross-validation fold: `test` holds this fold's subjects, the rest
/// are divided between train and val.
pub type Fold = Partition;

fn shuffled_real_subjects(ds: &Dataset, seed: u64) -> (Vec<&str>, Vec<usize>) {
    let mut real = Vec::new();
    let mut synthetic = Vec::new();
    for subject in ds.subject_ids() {
        let members = ds.subject_members(subject);
        if members.iter().all(|&i| ds.get(i).source == Source::Synthetic) {
            synthetic.extend_from_slice(members);
        } else {
            real.push(subject.as_str());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    real.shuffle(&mut rng);
    (real, synthetic)
}

/// Assigns each subject, in order, to the bucket furthest below its target
/// sample count relative to that target. Ties go to the earlier bucket.
fn greedy_assign<'a>(ds: &Dataset, subjects: &[&'a str], targets: &[f64]) -> Vec<Vec<&'a str>> {
    let total: usize = subjects.iter().map(|s| ds.subject_members(s).len()).sum();
    let mut filled = vec![0usize; targets.len()];
    let mut buckets = vec![Vec::new(); targets.len()];
    for &s in subjects {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for (b, &t) in targets.iter().enumerate() {
            let want = t * total as f64;
            let deficit = (want - filled[b] as f64) / want;
            if deficit > best_deficit {
                best = b;
                best_deficit = deficit;
            }
        }
        filled[best] += ds.subject_members(s).len();
        buckets[best].push(s);
    }
    buckets
}

fn members(ds: &Dataset, subjects: &[&str]) -> Vec<usize> {
    let mut out: Vec<usize> = subjects.iter().flat_map(|s| ds.subject_members(s).iter().copied()).collect();
    out.sort_unstable();
    out
}

/// Single train/val/test partition. Subjects made only of synthetic samples
/// always go to train.
pub fn subject_wise_split(ds: &Dataset, spec: &SplitSpec) -> Result<Partition> {
    spec.validate()?;
    let (subjects, synthetic) = shuffled_real_subjects(ds, spec.seed);
    if subjects.len() < 3 {
        return Err(Error::InsufficientSubjects { needed: 3, found: subjects.len() });
    }
    let r = spec.ratios;
    let b = greedy_assign(ds, &subjects, &[r.train, r.val, r.test]);
    let mut train = members(ds, &b[0]);
    train.extend(synthetic);
    train.sort_unstable();
    Ok(Partition { train, val: members(ds, &b[1]), test: members(ds, &b[2]) })
}

/// `spec.folds` folds whose test sets are disjoint and cover every real
/// subject. The remaining subjects of each fold are split between train and
/// val in the ratio `train : val`.
pub fn k_fold(ds: &Dataset, spec: &SplitSpec) -> Result<Vec<Fold>> {
    spec.validate()?;
    let (subjects, synthetic) = shuffled_real_subjects(ds, spec.seed);
    if subjects.len() < spec.folds {
        return Err(Error::InsufficientSubjects { needed: spec.folds, found: subjects.len() });
    }
    let buckets = greedy_assign(ds, &subjects, &vec![1.0 / spec.folds as f64; spec.folds]);
    let r = spec.ratios;
    let inner = [r.train / (r.train + r.val), r.val / (r.train + r.val)];
    let mut folds = Vec::with_capacity(spec.folds);
    for (f, test_subjects) in buckets.iter().enumerate() {
        let rest: Vec<&str> =
            buckets.iter().enumerate().filter(|&(g, _)| g != f).flat_map(|(_, b)| b.iter().copied()).collect();
        let tv = greedy_assign(ds, &rest, &inner);
        let mut train = members(ds, &tv[0]);
        train.extend(synthetic.iter().copied());
        train.sort_unstable();
        folds.push(Fold { train, val: members(ds, &tv[1]), test: members(ds, test_subjects) });
    }
    Ok(folds)
}

/// At most one randomly chosen sample from each of `size` randomly chosen
/// subjects. With more requested than available, strict mode fails and
/// non-strict mode returns one sample per subject.
pub fn sample_support_set(train: &Dataset, size: usize, seed: u64, strict: bool) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::InvalidConfig("support size must be at least 1".into()));
    }
    let n_subjects = train.num_subjects();
    if size > n_subjects {
        if strict {
            return Err(Error::SupportTooLarge { requested: size, subjects: n_subjects });
        }
        log::warn!("support size {size} exceeds {n_subjects} subjects; using one sample per subject");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects: Vec<&String> = train.subject_ids().iter().collect();
    subjects.shuffle(&mut rng);
    let mut picked: Vec<usize> = subjects
        .into_iter()
        .take(size)
        .map(|s| {
            let m = train.subject_members(s);
            m[rng.gen_range(0..m.len())]
        })
        .collect();
    picked.sort_unstable();
    Ok(train.subset(&picked))
}
