//! Paired-view digit dataset generator.
//!
//! Builds a controllable two-modality dataset from a single-image digit
//! corpus: a PCA basis is fitted to the training images, the principal
//! components are split into two (possibly overlapping) sets, and each
//! modality is the reconstruction of the images from its own component
//! set. Two knobs control the difficulty: `energy` — the fraction of
//! total variance each modality receives — and `share_ratio` — the
//! fraction of each modality's components that the two modalities share.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::idx;
use crate::data::mmft::{write_mmft, Labels, MultimodalDataset};
use crate::data::synth;
use crate::error::{Error, Result};
use crate::tensor::kernels::{gemm, gemm_nt, gemm_tn};

/// Per-set energy must land within this absolute distance of the target.
pub const ENERGY_ABS_TOL: f64 = 0.01;
/// Internal packing half-window; half the public tolerance so the greedy
/// assignment always leaves headroom against `ENERGY_ABS_TOL`.
const FIT_TOL: f64 = 0.005;
/// Slack on the joint-energy feasibility bound.
const FEASIBILITY_SLACK: f64 = 0.01;

/// Controls for the paired-view generator.
#[derive(Debug, Clone, PartialEq)]
pub struct MMnistConfig {
    /// Fraction of total variance given to each modality, in (0, 1].
    pub energy: f64,
    /// Fraction of each modality's components shared with the other, in [0, 1].
    pub share_ratio: f64,
    /// Recorded in the manifest; generation itself is deterministic.
    pub seed: u64,
    /// Fixed at 2: the component-splitting scheme is pairwise.
    pub n_modalities: usize,
}

impl Default for MMnistConfig {
    fn default() -> Self {
        Self { energy: 0.5, share_ratio: 0.5, seed: 0, n_modalities: 2 }
    }
}

impl MMnistConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.energy > 0.0 && self.energy <= 1.0) {
            return Err(Error::Config(format!(
                "energy must be in (0, 1], got {}",
                self.energy
            )));
        }
        if !(0.0..=1.0).contains(&self.share_ratio) {
            return Err(Error::Config(format!(
                "share_ratio must be in [0, 1], got {}",
                self.share_ratio
            )));
        }
        if self.n_modalities != 2 {
            return Err(Error::Config(format!(
                "component splitting supports exactly 2 modalities, got {}",
                self.n_modalities
            )));
        }
        // Two modalities claim `2E` of energy but share `~share·E` of it;
        // the distinct energy drawn from the basis is about E·(2 − share)
        // and cannot exceed the total variance.
        let joint = self.energy * (2.0 - self.share_ratio);
        if joint > 1.0 + FEASIBILITY_SLACK {
            return Err(Error::Config(format!(
                "infeasible: energy {} with share_ratio {} needs {:.3} of total \
                 variance (> 1)",
                self.energy, self.share_ratio, joint
            )));
        }
        Ok(())
    }
}

/// PCA basis of a flattened image corpus.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    /// Per-pixel mean of the training images, length `dim`.
    pub mean: Vec<f64>,
    /// Row-major `n_components x dim`; rows are orthonormal and ordered by
    /// descending singular value.
    pub components: Vec<f64>,
    /// Non-increasing, non-negative.
    pub singular_values: Vec<f64>,
    pub dim: usize,
}

impl PcaBasis {
    pub fn n_components(&self) -> usize {
        self.singular_values.len()
    }

    /// Fraction of total variance carried by each component:
    /// `sigma_i^2 / sum_j sigma_j^2`. All zeros for a zero-variance corpus.
    pub fn energies(&self) -> Vec<f64> {
        let total: f64 = self.singular_values.iter().map(|s| s * s).sum();
        if total <= 0.0 {
            return vec![0.0; self.singular_values.len()];
        }
        self.singular_values.iter().map(|s| s * s / total).collect()
    }

    /// Hex SHA-256 over the basis contents; identifies a fitted basis in
    /// manifests so downstream artifacts can be traced to it.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.n_components() as u64).to_le_bytes());
        for v in &self.mean {
            h.update(v.to_le_bytes());
        }
        for v in &self.singular_values {
            h.update(v.to_le_bytes());
        }
        for v in &self.components {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        let mut s = String::with_capacity(64);
        for b in digest {
            let _ = write!(s, "{b:02x}");
        }
        s
    }
}

/// Fit a PCA basis to `images` (row-major `n x d`, values in [0, 1]).
///
/// Uses the eigendecomposition of the `d x d` Gram matrix of the centered
/// data, which equals the right-singular decomposition of the data matrix.
/// Rank-deficient corpora are fine: trailing singular values come out zero.
pub fn fit_pca(images: &[f32], d: usize) -> Result<PcaBasis> {
    if d == 0 || images.len() % d != 0 {
        return Err(Error::Input(format!(
            "image buffer of {} values is not a whole number of {d}-pixel rows",
            images.len()
        )));
    }
    let n = images.len() / d;
    if n < d {
        return Err(Error::Input(format!(
            "PCA needs at least as many samples as pixels ({d}), got {n}"
        )));
    }

    let mut mean = vec![0.0f64; d];
    for row in images.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut centered = vec![0.0f64; n * d];
    for (i, row) in images.chunks_exact(d).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            centered[i * d + j] = v as f64 - mean[j];
        }
    }

    // Gram matrix G = Xc^T Xc; eigenvalues are squared singular values and
    // eigenvectors are the principal components.
    let mut gram = vec![0.0f64; d * d];
    gemm_tn(d, n, d, 1.0, &centered, &centered, 0.0, &mut gram);
    let (eigvals, eigvecs) = crate::linalg::sym_eigen_desc(&gram, d)?;

    let singular_values: Vec<f64> = eigvals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    Ok(PcaBasis { mean, components: eigvecs, singular_values, dim: d })
}

/// Which components feed which modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityAssignment {
    /// Sorted component indices for modality A (includes `shared`).
    pub indices_a: Vec<usize>,
    /// Sorted component indices for modality B (includes `shared`).
    pub indices_b: Vec<usize>,
    /// Sorted intersection of the two.
    pub shared: Vec<usize>,
}

impl ModalityAssignment {
    /// Realized energy of each modality under `basis`: (A, B).
    pub fn realized_energy(&self, basis: &PcaBasis) -> (f64, f64) {
        let e = basis.energies();
        let sum = |idx: &[usize]| idx.iter().map(|&i| e[i]).sum::<f64>();
        (sum(&self.indices_a), sum(&self.indices_b))
    }

    /// Realized shared fraction of each modality's component count: (A, B).
    /// An empty modality has no meaningful share and reports 0.
    pub fn realized_share(&self) -> (f64, f64) {
        let share = |idx: &[usize]| {
            if idx.is_empty() {
                0.0
            } else {
                self.shared.len() as f64 / idx.len() as f64
            }
        };
        (share(&self.indices_a), share(&self.indices_b))
    }
}

/// Record `candidate` (full per-modality index lists, their shared
/// subset of size `m`) if its realized share sits closer to the target
/// than the best so far; ties go to the larger pool so maximal-share
/// requests use every component they can.
fn consider_assignment(
    share_target: f64,
    m: usize,
    mut indices_a: Vec<usize>,
    mut indices_b: Vec<usize>,
    mut shared: Vec<usize>,
    best: &mut Option<(f64, usize, ModalityAssignment)>,
) {
    let share_of = |card: usize| {
        if card == 0 {
            share_target // empty set: vacuously on target
        } else {
            m as f64 / card as f64
        }
    };
    // Score by the worse of the two modalities: the realized share must
    // hold per modality, so a candidate is only as good as its weak side.
    let dist_a = (share_of(indices_a.len()) - share_target).abs();
    let dist_b = (share_of(indices_b.len()) - share_target).abs();
    let dist = dist_a.max(dist_b);
    let better = match best {
        None => true,
        Some((best_dist, best_m, _)) => {
            dist < *best_dist - 1e-12 || (dist < *best_dist + 1e-12 && m > *best_m)
        }
    };
    if better {
        indices_a.sort_unstable();
        indices_b.sort_unstable();
        shared.sort_unstable();
        *best = Some((dist, m, ModalityAssignment { indices_a, indices_b, shared }));
    }
}

/// Split the components between the two modalities.
///
/// Two candidate families are searched and the realized shared fraction
/// closest to `share_ratio` wins (ties to the larger pool).
///
/// First family — largest components shared: for every candidate pool
/// size `m`, the pool takes the `m` largest components that fit under
/// the energy target, then the remaining components are dealt to the
/// two exclusive sets, each going to the side that trails in energy —
/// each set skips components that would overshoot its budget and stops
/// once its cumulative energy (shared + exclusive) reaches the target
/// window. At full energy and full sharing this gives both modalities
/// every nonzero component.
///
/// Second family — matched pairs shared: starting from the disjoint
/// `m = 0` deal, the k-th smallest component of one exclusive set is
/// merged with its rank-mate from the other (the pair's survivor joins
/// both sets; whichever survivor keeps both energy sums best centered
/// in the window is kept, so the walk self-corrects). Set sizes stay
/// fixed, so this reaches shares on the fine lattices `m/|A|`, `m/|B|`
/// that the first family cannot express — low share targets at high
/// energy, where sharing the largest components would collapse the
/// set sizes.
pub fn assign_components(basis: &PcaBasis, cfg: &MMnistConfig) -> Result<ModalityAssignment> {
    cfg.validate()?;
    let energies = basis.energies();
    if energies.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Data(
            "corpus has zero variance; no components carry energy".into(),
        ));
    }
    let n = energies.len();
    let target = cfg.energy;
    let in_window = |c: f64| (target - FIT_TOL..=target + FIT_TOL).contains(&c);

    // The m-component shared pool is always the first m entries of the
    // uncapped skip-greedy walk, so compute that walk once.
    let mut greedy_order = Vec::new();
    let mut cum = 0.0;
    for i in 0..n {
        if cum + energies[i] <= target + FIT_TOL {
            greedy_order.push(i);
            cum += energies[i];
        }
    }

    let mut in_shared = vec![false; n];
    let mut best: Option<(f64, usize, ModalityAssignment)> = None;
    let mut disjoint_deal: Option<(Vec<usize>, Vec<usize>, f64, f64)> = None;
    for m in 0..=greedy_order.len() {
        for f in in_shared.iter_mut() {
            *f = false;
        }
        let shared = &greedy_order[..m];
        let e_sh: f64 = shared.iter().map(|&i| energies[i]).sum();
        for &i in shared {
            in_shared[i] = true;
        }

        let done = |c: f64| c >= target - FIT_TOL;
        let mut excl_a = Vec::new();
        let mut excl_b = Vec::new();
        let (mut cum_a, mut cum_b) = (e_sh, e_sh);
        for i in 0..n {
            if done(cum_a) && done(cum_b) {
                break;
            }
            if in_shared[i] {
                continue;
            }
            let fits_a = !done(cum_a) && cum_a + energies[i] <= target + FIT_TOL;
            let fits_b = !done(cum_b) && cum_b + energies[i] <= target + FIT_TOL;
            // Deal to whichever side trails in energy (ties to A) so the
            // two walks stay balanced and finish with comparable
            // cardinalities; a strict turn order would let the side that
            // drew the larger components finish early and leave the other
            // to mop up a long run of tail components.
            if cum_a <= cum_b {
                if fits_a {
                    excl_a.push(i);
                    cum_a += energies[i];
                } else if fits_b {
                    excl_b.push(i);
                    cum_b += energies[i];
                }
            } else if fits_b {
                excl_b.push(i);
                cum_b += energies[i];
            } else if fits_a {
                excl_a.push(i);
                cum_a += energies[i];
            }
        }
        if !done(cum_a) || !done(cum_b) {
            continue;
        }
        if m == 0 {
            disjoint_deal = Some((excl_a.clone(), excl_b.clone(), cum_a, cum_b));
        }
        let indices_a: Vec<usize> = shared.iter().copied().chain(excl_a).collect();
        let indices_b: Vec<usize> = shared.iter().copied().chain(excl_b).collect();
        consider_assignment(cfg.share_ratio, m, indices_a, indices_b, shared.to_vec(), &mut best);
    }

    if let Some((base_a, base_b, mut cum_a, mut cum_b)) = disjoint_deal {
        let pairs = base_a.len().min(base_b.len());
        let mut set_a = base_a.clone();
        let mut set_b = base_b.clone();
        let mut shared: Vec<usize> = Vec::new();
        let fit = |x: f64| (x - target).abs();
        for j in 0..pairs {
            // Tail-first: smallest energies migrate first, so the drift
            // each merge adds is as small as the spectrum allows.
            let pair = pairs - 1 - j;
            let (ai, bi) = (base_a[pair], base_b[pair]);
            let d = energies[ai] - energies[bi];
            // Either `ai` survives in both sets (B's sum drifts by +d)
            // or `bi` does (A's sum drifts by −d). Pick whichever keeps
            // both sums in the window, preferring the better-centered
            // outcome, so the walk self-corrects instead of drifting
            // out at one edge.
            let b_after = cum_b + d;
            let a_after = cum_a - d;
            let keep_a_ok = in_window(cum_a) && in_window(b_after);
            let keep_b_ok = in_window(a_after) && in_window(cum_b);
            let keep_a = match (keep_a_ok, keep_b_ok) {
                (true, false) => true,
                (false, true) => false,
                _ => fit(cum_a).max(fit(b_after)) <= fit(a_after).max(fit(cum_b)),
            };
            if keep_a {
                // `ai` joins both sets; `bi` leaves the split entirely.
                set_b.retain(|&x| x != bi);
                set_b.push(ai);
                cum_b = b_after;
                shared.push(ai);
            } else {
                set_a.retain(|&x| x != ai);
                set_a.push(bi);
                cum_a = a_after;
                shared.push(bi);
            }
            if in_window(cum_a) && in_window(cum_b) {
                consider_assignment(
                    cfg.share_ratio,
                    j + 1,
                    set_a.clone(),
                    set_b.clone(),
                    shared.clone(),
                    &mut best,
                );
            }
        }
    }

    best.map(|(_, _, a)| a).ok_or_else(|| {
        Error::Config(format!(
            "no component split reaches energy {} per modality within {} on this \
             corpus (share_ratio {})",
            target, ENERGY_ABS_TOL, cfg.share_ratio
        ))
    })
}

/// Reconstruct `images` (row-major `n x basis.dim`, values in [0, 1]) from
/// the selected components: project the centered images onto the component
/// subspace, map back, re-add the mean, and clip to [0, 1].
pub fn render_modality(images: &[f32], basis: &PcaBasis, indices: &[usize]) -> Result<Vec<f32>> {
    let d = basis.dim;
    if d == 0 || images.len() % d != 0 {
        return Err(Error::Input(format!(
            "image buffer of {} values is not a whole number of {d}-pixel rows",
            images.len()
        )));
    }
    let n = images.len() / d;
    let k = indices.len();
    if let Some(&bad) = indices.iter().find(|&&i| i >= basis.n_components()) {
        return Err(Error::Input(format!(
            "component index {bad} out of range (basis has {})",
            basis.n_components()
        )));
    }

    let mut out = vec![0.0f32; n * d];
    if k == 0 {
        // Pure-mean reconstruction.
        let clipped: Vec<f32> = basis.mean.iter().map(|&m| m.clamp(0.0, 1.0) as f32).collect();
        for row in out.chunks_exact_mut(d) {
            row.copy_from_slice(&clipped);
        }
        return Ok(out);
    }

    let mut centered = vec![0.0f64; n * d];
    for (i, row) in images.chunks_exact(d).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            centered[i * d + j] = v as f64 - basis.mean[j];
        }
    }
    let mut v_sel = vec![0.0f64; k * d];
    for (r, &ci) in indices.iter().enumerate() {
        v_sel[r * d..(r + 1) * d].copy_from_slice(&basis.components[ci * d..(ci + 1) * d]);
    }
    // scores = Xc V^T  (n x k), recon = scores V  (n x d)
    let mut scores = vec![0.0f64; n * k];
    gemm_nt(n, d, k, 1.0, &centered, &v_sel, 0.0, &mut scores);
    let mut recon = vec![0.0f64; n * d];
    gemm(n, k, d, 1.0, &scores, &v_sel, 0.0, &mut recon);

    for (o, (r, j)) in out
        .iter_mut()
        .zip(recon.iter().zip((0..d).cycle()))
    {
        *o = (r + basis.mean[j]).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// What `generate` produced, for manifests and reporting.
#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub n_train: usize,
    pub n_test: usize,
    pub assignment: ModalityAssignment,
    pub realized_energy: (f64, f64),
    pub realized_share: (f64, f64),
    pub basis_checksum: String,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub manifest_path: PathBuf,
}

/// End-to-end generation: read a digit corpus in IDX format from
/// `corpus_dir` (standard file names), fit PCA on the training images,
/// split the components, render both modalities for the train and test
/// splits (the test split reuses the training basis), and write
/// `mmnist_train.mmft`, `mmnist_test.mmft`, and `manifest.txt` into
/// `out_dir`.
pub fn generate(cfg: &MMnistConfig, corpus_dir: &Path, out_dir: &Path) -> Result<GenerateSummary> {
    cfg.validate()?;
    let train = idx::read_idx_images(&corpus_dir.join(synth::TRAIN_IMAGES))?;
    let train_labels = idx::read_idx_labels(&corpus_dir.join(synth::TRAIN_LABELS))?;
    let test = idx::read_idx_images(&corpus_dir.join(synth::TEST_IMAGES))?;
    let test_labels = idx::read_idx_labels(&corpus_dir.join(synth::TEST_LABELS))?;
    if train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(Error::Data(format!(
            "image/label count mismatch: train {} vs {}, test {} vs {}",
            train.len(),
            train_labels.len(),
            test.len(),
            test_labels.len()
        )));
    }

    let d = train.rows * train.cols;
    let basis = fit_pca(&train.pixels, d)?;
    let assignment = assign_components(&basis, cfg)?;
    let realized_energy = assignment.realized_energy(&basis);
    let realized_share = assignment.realized_share();

    let n_classes = train_labels
        .iter()
        .chain(&test_labels)
        .map(|&l| l as u32 + 1)
        .max()
        .unwrap_or(1);

    let build = |images: &idx::IdxImages, labels: &[u8]| -> Result<MultimodalDataset> {
        let a = render_modality(&images.pixels, &basis, &assignment.indices_a)?;
        let b = render_modality(&images.pixels, &basis, &assignment.indices_b)?;
        Ok(MultimodalDataset {
            dims: vec![d, d],
            modalities: vec![a, b],
            labels: Labels::Classes {
                ids: labels.iter().map(|&l| l as u32).collect(),
                n_classes,
            },
        })
    };
    std::fs::create_dir_all(out_dir)?;
    let train_ds = build(&train, &train_labels)?;
    let test_ds = build(&test, &test_labels)?;
    let train_path = out_dir.join("mmnist_train.mmft");
    let test_path = out_dir.join("mmnist_test.mmft");
    write_mmft(&train_path, &train_ds)?;
    write_mmft(&test_path, &test_ds)?;

    let checksum = basis.checksum();
    let join = |idx: &[usize]| {
        idx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
    };
    let manifest = format!(
        "energy={}\nshare_ratio={}\nseed={}\nn_modalities={}\n\
         n_train={}\nn_test={}\nn_classes={}\n\
         realized_energy_a={:.6}\nrealized_energy_b={:.6}\n\
         realized_share_a={:.6}\nrealized_share_b={:.6}\n\
         shared_components={}\ncomponents_a={}\ncomponents_b={}\n\
         basis_sha256={}\nindices_a={}\nindices_b={}\nindices_shared={}\n",
        cfg.energy,
        cfg.share_ratio,
        cfg.seed,
        cfg.n_modalities,
        train.len(),
        test.len(),
        n_classes,
        realized_energy.0,
        realized_energy.1,
        realized_share.0,
        realized_share.1,
        assignment.shared.len(),
        assignment.indices_a.len(),
        assignment.indices_b.len(),
        checksum,
        join(&assignment.indices_a),
        join(&assignment.indices_b),
        join(&assignment.shared),
    );
    let manifest_path = out_dir.join("manifest.txt");
    std::fs::write(&manifest_path, manifest)?;

    Ok(GenerateSummary {
        n_train: train.len(),
        n_test: test.len(),
        assignment,
        realized_energy,
        realized_share,
        basis_checksum: checksum,
        train_path,
        test_path,
        manifest_path,
    })
}
