use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::AttributionError;
use crate::model::DifferentiableModel;
use crate::seed::derive_seed;
use crate::tensor::{Heatmap, ImageTensor};

/// Integer group index per pixel, row-major numbering of a patch grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGroupMask {
    pub height: usize,
    pub width: usize,
    pub groups: usize,
    pub values: Vec<usize>,
}

impl PatchGroupMask {
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.groups];
        for &g in &self.values {
            sizes[g] += 1;
        }
        sizes
    }

    pub fn members(&self, group: usize) -> Vec<usize> {
        self.values.iter().enumerate().filter(|(_, &g)| g == group).map(|(i, _)| i).collect()
    }
}

/// Non-overlapping `patch x patch` groups; partial patches at the right and
/// bottom borders form their own smaller groups.
pub fn make_patch_groups(height: usize, width: usize, patch: usize) -> PatchGroupMask {
    assert!(patch >= 1, "patch must be at least 1");
    let cols = width.div_ceil(patch);
    let rows = height.div_ceil(patch);
    let values = (0..height * width).map(|i| (i / width / patch) * cols + (i % width) / patch).collect();
    PatchGroupMask { height, width, groups: rows * cols, values }
}

/// The batch permutations drawn for `group`, one per repeat. Element `s` of a
/// permutation is the batch index whose patch pixels sample `s` receives.
pub fn permutation_for(seed: u64, group: usize, repeats: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, group as u64));
    (0..repeats)
        .map(|_| {
            let mut perm: Vec<usize> = (0..batch).collect();
            perm.shuffle(&mut rng);
            perm
        })
        .collect()
}

/// Patch-wise permutation importance: for each group, the group's pixels are
/// shuffled across the batch with one shared permutation, and the score of
/// sample `s` is `logit(x_s) - logit(perturbed_s)` for its target, averaged
/// over `repeats` permutations. Scores are painted over each patch.
pub fn feature_permutation<M: DifferentiableModel + ?Sized>(
    model: &M,
    batch: &[ImageTensor],
    targets: &[usize],
    patch: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<Heatmap>, AttributionError> {
    if batch.len() < 2 {
        return Err(AttributionError::BatchTooSmall(batch.len()));
    }
    if batch.len() != targets.len() {
        return Err(AttributionError::TargetCount { images: batch.len(), targets: targets.len() });
    }
    if repeats == 0 || patch == 0 {
        return Err(AttributionError::Config("patch and repeats must be at least 1".into()));
    }
    let (channels, height, width) = batch[0].shape();
    if patch > height || patch > width {
        return Err(AttributionError::PatchTooLarge { patch, height, width });
    }
    for image in batch {
        model.check_input(image)?;
    }
    let baseline: Vec<f64> = batch
        .iter()
        .zip(targets)
        .map(|(x, &t)| model.logit(x, t))
        .collect::<Result<_, _>>()?;
    let groups = make_patch_groups(height, width, patch);
    let plane = height * width;

    let scores: Vec<Vec<f64>> = (0..groups.groups)
        .into_par_iter()
        .map(|g| -> Result<Vec<f64>, AttributionError> {
            let members = groups.members(g);
            let mut acc = vec![0.0; batch.len()];
            for perm in permutation_for(seed, g, repeats, batch.len()) {
                for (s, &src) in perm.iter().enumerate() {
                    let mut perturbed = batch[s].clone();
                    for c in 0..channels {
                        for &p in &members {
                            perturbed.values_mut()[c * plane + p] = batch[src].values()[c * plane + p];
                        }
                    }
                    acc[s] += baseline[s] - model.logit(&perturbed, targets[s])?;
                }
            }
            Ok(acc.into_iter().map(|a| a / repeats as f64).collect())
        })
        .collect::<Result<_, _>>()?;

    (0..batch.len())
        .map(|s| {
            let values = groups.values.iter().map(|&g| scores[g][s]).collect();
            Ok(Heatmap::new(height, width, values)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearModel;

    #[test]
    fn patch_grid_examples() {
        let full = make_patch_groups(224, 224, 16);
        assert_eq!(full.groups, 196);
        assert!(full.group_sizes().iter().all(|&s| s == 256));
        assert_eq!(make_patch_groups(5, 7, 7).groups, 1);
        let mut sizes = make_patch_groups(5, 5, 2).group_sizes();
        sizes.sort();
        assert_eq!(sizes, [1, 2, 2, 2, 2, 4, 4, 4, 4]);
    }

    #[test]
    fn patch_indices_are_row_major_and_contiguous() {
        let g = make_patch_groups(4, 6, 2);
        assert_eq!(&g.values[..6], &[0, 0, 1, 1, 2, 2]);
        assert_eq!(&g.values[12..18], &[3, 3, 4, 4, 5, 5]);
        assert!(g.group_sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn identical_batch_and_constant_model_give_zero() {
        let x = ImageTensor::new(1, 4, 4, (0..16).map(|i| i as f64 / 8.0 - 1.0).collect()).unwrap();
        let w = vec![(0..16).map(|i| (i as f64).sin()).collect(), vec![0.0; 16]];
        let lin = LinearModel::new((1, 4, 4), w, vec![0.0; 2]).unwrap();
        let maps = feature_permutation(&lin, &[x.clone(), x.clone(), x.clone()], &[0, 0, 0], 2, 3, 9).unwrap();
        assert!(maps.iter().all(|m| m.values().iter().all(|&v| v == 0.0)));

        let y = x.lerp(&x.zeros_like(), 0.5);
        let flat = LinearModel::constant((1, 4, 4), 2, 1.5);
        let maps = feature_permutation(&flat, &[x, y], &[1, 1], 2, 3, 9).unwrap();
        assert!(maps.iter().all(|m| m.values().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn rejects_bad_batches() {
        let x = ImageTensor::filled(1, 4, 4, 0.0).unwrap();
        let m = LinearModel::constant((1, 4, 4), 2, 0.0);
        assert_eq!(
            feature_permutation(&m, std::slice::from_ref(&x), &[0], 2, 1, 0),
            Err(AttributionError::BatchTooSmall(1))
        );
        assert!(matches!(
            feature_permutation(&m, &[x.clone(), x.clone()], &[0, 0], 5, 1, 0),
            Err(AttributionError::PatchTooLarge { .. })
        ));
    }

    #[test]
    fn output_is_constant_per_patch_and_reproducible() {
        let imgs: Vec<_> = (0..3)
            .map(|k| ImageTensor::new(1, 5, 5, (0..25).map(|i| ((i * (k + 2)) as f64).cos()).collect()).unwrap())
            .collect();
        let w = vec![(0..25).map(|i| (i as f64 * 0.3).sin()).collect(), vec![0.1; 25]];
        let m = LinearModel::new((1, 5, 5), w, vec![0.0; 2]).unwrap();
        let a = feature_permutation(&m, &imgs, &[0, 1, 0], 2, 4, 17).unwrap();
        let b = feature_permutation(&m, &imgs, &[0, 1, 0], 2, 4, 17).unwrap();
        assert_eq!(a, b);
        let groups = make_patch_groups(5, 5, 2);
        for map in &a {
            for g in 0..groups.groups {
                let members = groups.members(g);
                assert!(members.iter().all(|&p| map.values()[p] == map.values()[members[0]]));
            }
        }
    }
}
