use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset, Result};
use crate::reweight::{uniform_weights, WeightVector};

/// Flips `round(ratio · n)` labels, half in each group (the odd flip goes to
/// the majority). Flip positions depend only on `seed` and the group sizes,
/// so applying it twice with the same seed restores the labels.
pub fn inject_label_noise(data: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DataError::BadRatio(ratio));
    }
    let flips = (ratio * data.len() as f64).round() as usize;
    let mut labels = data.labels.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (s, k) in [(1u8, flips.div_ceil(2)), (0u8, flips / 2)] {
        let members = data.group_indices(s);
        if k > members.len() {
            return Err(DataError::TooManyFlips {
                flips: k,
                size: members.len(),
            });
        }
        for j in index::sample(&mut rng, members.len(), k) {
            labels[members[j]] ^= 1;
        }
    }
    Ok(data.with_labels(labels))
}

fn nonempty(data: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    let (maj, min) = (data.group_indices(1), data.group_indices(0));
    if maj.is_empty() {
        return Err(DataError::EmptyGroup("majority".into()));
    }
    if min.is_empty() {
        return Err(DataError::EmptyGroup("minority".into()));
    }
    Ok((maj, min))
}

/// Majority reduced to `n_u` rows drawn without replacement.
pub fn undersample(data: &Dataset, seed: u64) -> Result<Dataset> {
    let (maj, min) = nonempty(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = min.len().min(maj.len());
    let mut idx: Vec<usize> = index::sample(&mut rng, maj.len(), keep)
        .into_iter()
        .map(|j| maj[j])
        .collect();
    idx.sort_unstable();
    idx.extend_from_slice(&min);
    Ok(data.subset(&idx))
}

/// Minority repeated `⌊n_p/n_u⌋` times, plus `n_p mod n_u` distinct extra
/// rows, so both groups have `n_p` rows.
pub fn oversample(data: &Dataset, seed: u64) -> Result<Dataset> {
    let (maj, min) = nonempty(data)?;
    if maj.len() < min.len() {
        return Err(DataError::MajoritySmaller {
            n_p: maj.len(),
            n_u: min.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = maj.clone();
    for _ in 0..maj.len() / min.len() {
        idx.extend_from_slice(&min);
    }
    let mut extra: Vec<usize> = index::sample(&mut rng, min.len(), maj.len() % min.len())
        .into_iter()
        .map(|j| min[j])
        .collect();
    extra.sort_unstable();
    idx.extend(extra);
    Ok(data.subset(&idx))
}

/// The simple reweighing baseline: every majority row weighted `n_u / n_p`.
pub fn reweighing_weights(data: &Dataset) -> Result<WeightVector> {
    let (maj, min) = nonempty(data)?;
    Ok(uniform_weights(maj.len(), min.len(), 0.0).expect("both groups nonempty"))
}

/// One subgroup paired with the reference subgroup, as a binary problem:
/// `members` get `s = 1` (reweighted side), `reference` rows `s = 0`.
#[derive(Debug, Clone)]
pub struct SubgroupView {
    pub level: usize,
    pub name: String,
    pub members: Vec<usize>,
    pub reference: Vec<usize>,
}

impl SubgroupView {
    /// Binary dataset over `members ∪ reference`.
    pub fn dataset(&self, data: &Dataset) -> Dataset {
        let idx: Vec<usize> = self.members.iter().chain(&self.reference).copied().collect();
        let mut view = data.subset(&idx);
        for (i, s) in view.sensitive.iter_mut().enumerate() {
            *s = u8::from(i < self.members.len());
        }
        view
    }
}

/// One view per non-reference level of the raw sensitive column.
pub fn multi_group_prepare(data: &Dataset, reference: &str) -> Result<Vec<SubgroupView>> {
    let r = data
        .level_names
        .iter()
        .position(|n| n == reference)
        .ok_or_else(|| DataError::UnknownLevel(reference.to_string()))?;
    if data.level_names.len() < 2 {
        return Err(DataError::Schema("need at least two sensitive levels".into()));
    }
    let members_of = |l: usize| -> Vec<usize> { (0..data.len()).filter(|&i| data.levels[i] == l).collect() };
    let reference_rows = members_of(r);
    if reference_rows.is_empty() {
        return Err(DataError::EmptyGroup(reference.to_string()));
    }
    let mut views = Vec::new();
    for (l, name) in data.level_names.iter().enumerate() {
        if l == r {
            continue;
        }
        let members = members_of(l);
        if members.is_empty() {
            return Err(DataError::EmptyGroup(name.clone()));
        }
        views.push(SubgroupView {
            level: l,
            name: name.clone(),
            members,
            reference: reference_rows.clone(),
        });
    }
    Ok(views)
}
