//! Training objectives: next-item prediction with sampled negatives, the
//! per-level contrastive loss over paired views, and their weighted
//! combination.

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HiddenStates, ModelParams};

/// Per-level contrastive weights λ_m and temperatures τ_m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambdas: Vec<f64>,
    pub temperatures: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambdas: vec![0.1, 0.075, 0.05],
            temperatures: vec![1.0, 1.5, 2.0],
        }
    }
}

impl LossWeights {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.lambdas.len() != levels || self.temperatures.len() != levels {
            return Err(Error::Config(format!(
                "loss weights carry {} lambdas / {} temperatures for {levels} levels",
                self.lambdas.len(),
                self.temperatures.len()
            )));
        }
        if self.lambdas.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("lambdas must be non-negative and finite".into()));
        }
        if self.temperatures.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::Config("temperatures must be positive and finite".into()));
        }
        Ok(())
    }

    /// First `levels` entries of the defaults, for reduced-level runs.
    pub fn default_for_levels(levels: usize) -> Self {
        let d = LossWeights::default();
        if levels <= d.lambdas.len() {
            LossWeights {
                lambdas: d.lambdas[..levels].to_vec(),
                temperatures: d.temperatures[..levels].to_vec(),
            }
        } else {
            // Extend with the default gaps (λ −0.025, τ +0.5 per level).
            let mut lambdas = d.lambdas.clone();
            let mut temperatures = d.temperatures.clone();
            while lambdas.len() < levels {
                lambdas.push((lambdas.last().unwrap() - 0.025).max(0.0));
                temperatures.push(temperatures.last().unwrap() + 0.5);
            }
            LossWeights { lambdas, temperatures }
        }
    }
}

/// True when the sequence moves strictly in one direction with a constant
/// step (used by the sweep enumerator to build level tuples).
pub fn is_equal_gap_monotone(xs: &[f64], ascending: bool) -> bool {
    if xs.len() < 2 {
        return true;
    }
    let gap = xs[1] - xs[0];
    if ascending && gap <= 0.0 || !ascending && gap >= 0.0 {
        return false;
    }
    xs.windows(2).all(|w| (w[1] - w[0] - gap).abs() < 1e-9)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_pairs(
    h: &HiddenStates,
    targets: &Array2<usize>,
    negatives: &Array2<usize>,
    n_items: usize,
) -> Result<usize> {
    let (b, t, _) = h.values.dim();
    if targets.dim() != (b, t) || negatives.dim() != (b, t) {
        return Err(Error::Config("targets/negatives shape mismatch".into()));
    }
    let mut valid = 0;
    for bi in 0..b {
        for ti in 0..t {
            let pos = targets[[bi, ti]];
            if !h.mask[[bi, ti]] || pos == 0 {
                continue;
            }
            let neg = negatives[[bi, ti]];
            if pos > n_items || neg > n_items {
                return Err(Error::Data(format!(
                    "target/negative index out of vocabulary at ({bi},{ti})"
                )));
            }
            if neg == 0 {
                return Err(Error::Data(format!(
                    "missing negative at valid position ({bi},{ti})"
                )));
            }
            if neg == pos {
                return Err(Error::Data(format!(
                    "negative equals positive at ({bi},{ti}); batch construction must resample"
                )));
            }
            valid += 1;
        }
    }
    Ok(valid)
}

/// Mean over real positions of −log σ(⟨h_t, e_pos⟩) − log(1 − σ(⟨h_t, e_neg⟩)).
/// Positions with a zero target or padding mask are skipped.
pub fn next_item_loss(
    h: &HiddenStates,
    targets: &Array2<usize>,
    negatives: &Array2<usize>,
    params: &ModelParams,
) -> Result<f64> {
    let valid = check_pairs(h, targets, negatives, params.dims.n_items)?;
    if valid == 0 {
        return Err(Error::Data("no valid prediction positions in batch".into()));
    }
    let (b, t, d) = h.values.dim();
    let mut total = 0.0;
    for bi in 0..b {
        for ti in 0..t {
            let pos = targets[[bi, ti]];
            if !h.mask[[bi, ti]] || pos == 0 {
                continue;
            }
            let neg = negatives[[bi, ti]];
            let mut zp = 0.0;
            let mut zn = 0.0;
            for di in 0..d {
                let hv = h.values[[bi, ti, di]];
                zp += hv * params.item_embedding[[pos, di]];
                zn += hv * params.item_embedding[[neg, di]];
            }
            total += softplus(-zp) + softplus(zn);
        }
    }
    Ok(total / valid as f64)
}

/// `next_item_loss` plus gradients: accumulates d(item_embedding) into
/// `grads` and returns (loss, d(h.values)).
pub fn next_item_loss_with_grad(
    h: &HiddenStates,
    targets: &Array2<usize>,
    negatives: &Array2<usize>,
    params: &ModelParams,
    grads: &mut ModelParams,
) -> Result<(f64, Array3<f64>)> {
    let valid = check_pairs(h, targets, negatives, params.dims.n_items)?;
    if valid == 0 {
        return Err(Error::Data("no valid prediction positions in batch".into()));
    }
    let (b, t, d) = h.values.dim();
    let inv = 1.0 / valid as f64;
    let mut total = 0.0;
    let mut dh = Array3::zeros((b, t, d));
    for bi in 0..b {
        for ti in 0..t {
            let pos = targets[[bi, ti]];
            if !h.mask[[bi, ti]] || pos == 0 {
                continue;
            }
            let neg = negatives[[bi, ti]];
            let mut zp = 0.0;
            let mut zn = 0.0;
            for di in 0..d {
                let hv = h.values[[bi, ti, di]];
                zp += hv * params.item_embedding[[pos, di]];
                zn += hv * params.item_embedding[[neg, di]];
            }
            total += softplus(-zp) + softplus(zn);
            let dzp = (sigmoid(zp) - 1.0) * inv;
            let dzn = sigmoid(zn) * inv;
            for di in 0..d {
                let hv = h.values[[bi, ti, di]];
                dh[[bi, ti, di]] += dzp * params.item_embedding[[pos, di]]
                    + dzn * params.item_embedding[[neg, di]];
                grads.item_embedding[[pos, di]] += dzp * hv;
                grads.item_embedding[[neg, di]] += dzn * hv;
            }
        }
    }
    Ok((total * inv, dh))
}

/// How two contrastive representations are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveSim {
    Dot,
    Cosine,
}

fn stack_views(reps_a: &Array2<f64>, reps_b: &Array2<f64>) -> Result<Array2<f64>> {
    if reps_a.dim() != reps_b.dim() {
        return Err(Error::Config("view representation shapes differ".into()));
    }
    if reps_a.iter().chain(reps_b.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite contrastive representation".into()));
    }
    Ok(ndarray::concatenate(Axis(0), &[reps_a.view(), reps_b.view()])
        .expect("same width"))
}

fn normalize_rows(z: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut norms = Array1::zeros(z.nrows());
    let mut out = z.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if n < 1e-300 {
            return Err(Error::Numeric(format!(
                "zero-norm representation at row {i} cannot be cosine-normalized"
            )));
        }
        norms[i] = n;
        row.mapv_inplace(|x| x / n);
    }
    Ok((out, norms))
}

/// InfoNCE over 2B anchors: each view's positive is its partner; the
/// candidate set is every view but the anchor itself. Returns the mean loss.
struct NceCore {
    loss: f64,
    /// dL/dZ for the (possibly normalized) stacked views.
    dz: Option<Array2<f64>>,
}

fn info_nce_core(z: &Array2<f64>, tau: f64, want_grad: bool) -> Result<NceCore> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let n = z.nrows(); // 2B
    let b = n / 2;
    let s = z.dot(&z.t()) / tau;
    let partner = |i: usize| if i < b { i + b } else { i - b };
    let mut total = 0.0;
    let mut g: Option<Array2<f64>> = want_grad.then(|| Array2::zeros((n, n)));
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i {
                max = max.max(s[[i, j]]);
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                sum += (s[[i, j]] - max).exp();
            }
        }
        let lse = max + sum.ln();
        total += lse - s[[i, partner(i)]];
        if let Some(g) = g.as_mut() {
            for j in 0..n {
                if j != i {
                    let q = (s[[i, j]] - lse).exp();
                    g[[i, j]] = (q - f64::from(j == partner(i))) / n as f64;
                }
            }
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("contrastive loss is non-finite".into()));
    }
    let dz = g.map(|g| (&g + &g.t()).dot(z) / tau);
    Ok(NceCore { loss, dz })
}

pub fn info_nce(
    reps_a: &Array2<f64>,
    reps_b: &Array2<f64>,
    tau: f64,
    sim: ContrastiveSim,
) -> Result<f64> {
    let z = stack_views(reps_a, reps_b)?;
    let z = match sim {
        ContrastiveSim::Dot => z,
        ContrastiveSim::Cosine => normalize_rows(&z)?.0,
    };
    Ok(info_nce_core(&z, tau, false)?.loss)
}

/// InfoNCE plus gradients with respect to both view representations.
pub fn info_nce_with_grad(
    reps_a: &Array2<f64>,
    reps_b: &Array2<f64>,
    tau: f64,
    sim: ContrastiveSim,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let z = stack_views(reps_a, reps_b)?;
    let b = reps_a.nrows();
    let (loss, dz) = match sim {
        ContrastiveSim::Dot => {
            let core = info_nce_core(&z, tau, true)?;
            (core.loss, core.dz.unwrap())
        }
        ContrastiveSim::Cosine => {
            let (zn, norms) = normalize_rows(&z)?;
            let core = info_nce_core(&zn, tau, true)?;
            let dn = core.dz.unwrap();
            // dz_i = (dn_i − (dn_i·n̂_i) n̂_i) / ‖z_i‖
            let mut dz = Array2::zeros(z.dim());
            for i in 0..z.nrows() {
                let nh = zn.row(i);
                let g = dn.row(i);
                let proj: f64 = g.iter().zip(nh.iter()).map(|(a, b)| a * b).sum();
                for (k, out) in dz.row_mut(i).iter_mut().enumerate() {
                    *out = (g[k] - proj * nh[k]) / norms[i];
                }
            }
            (core.loss, dz)
        }
    };
    let da = dz.slice(ndarray::s![..b, ..]).to_owned();
    let db = dz.slice(ndarray::s![b.., ..]).to_owned();
    Ok((loss, da, db))
}

/// Σ_m λ_m · L^m_CL.
pub fn total_contrastive(per_level: &[f64], weights: &LossWeights) -> Result<f64> {
    if per_level.len() != weights.lambdas.len() {
        return Err(Error::Config(format!(
            "{} level losses but {} lambdas",
            per_level.len(),
            weights.lambdas.len()
        )));
    }
    Ok(per_level
        .iter()
        .zip(&weights.lambdas)
        .map(|(l, w)| l * w)
        .sum())
}

/// L_final = L_SR + L_totalCL, with no coefficient on either term.
pub fn final_loss(l_sr: f64, l_cl: f64) -> f64 {
    l_sr + l_cl
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{embed, ModelDims, ModelParams};
    use ndarray::array;

    fn tiny_model(seed: u64) -> ModelParams {
        ModelParams::init(
            ModelDims {
                n_items: 9,
                d: 4,
                heads: 2,
                layers: 1,
                max_len: 5,
                levels: 1,
            },
            false,
            seed,
        )
        .unwrap()
    }

    fn states_from(batch: &Array2<usize>, params: &ModelParams) -> HiddenStates {
        // Raw embeddings double as generic hidden states for loss tests.
        embed(batch, params).unwrap()
    }

    #[test]
    fn saturated_logits_give_zero_loss() {
        let mut params = tiny_model(1);
        params.item_embedding.row_mut(1).assign(&array![40.0, 0.0, 0.0, 0.0]);
        params.item_embedding.row_mut(2).assign(&array![-40.0, 0.0, 0.0, 0.0]);
        let mut h = states_from(&array![[3usize]], &params);
        h.values = ndarray::Array3::from_shape_vec((1, 1, 4), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let targets = array![[1usize]];
        let negatives = array![[2usize]];
        let loss = next_item_loss(&h, &targets, &negatives, &params).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn zero_logits_cost_two_log_two() {
        let mut params = tiny_model(1);
        params.item_embedding.row_mut(1).fill(0.0);
        params.item_embedding.row_mut(2).fill(0.0);
        let mut h = states_from(&array![[3usize, 4]], &params);
        h.values.fill(0.3);
        let targets = array![[1usize, 1]];
        let negatives = array![[2usize, 2]];
        let loss = next_item_loss(&h, &targets, &negatives, &params).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let params = tiny_model(5);
        let batch = array![[0usize, 2, 5, 7, 1], [3, 4, 6, 8, 9]];
        let h = states_from(&batch, &params);
        let targets = array![[0usize, 5, 7, 1, 2], [4, 6, 8, 9, 3]];
        let negatives = array![[0usize, 1, 2, 3, 4], [5, 7, 1, 2, 4]];
        let loss = next_item_loss(&h, &targets, &negatives, &params).unwrap();
        // Independent reimplementation with textbook formulas.
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut total = 0.0;
        let mut count = 0;
        for bi in 0..2 {
            for ti in 0..5 {
                if !h.mask[[bi, ti]] || targets[[bi, ti]] == 0 {
                    continue;
                }
                let dot = |item: usize| {
                    (0..4)
                        .map(|di| h.values[[bi, ti, di]] * params.item_embedding[[item, di]])
                        .sum::<f64>()
                };
                total += -sig(dot(targets[[bi, ti]])).ln()
                    - (1.0 - sig(dot(negatives[[bi, ti]]))).ln();
                count += 1;
            }
        }
        assert!((loss - total / count as f64).abs() < 1e-10);
    }

    #[test]
    fn loss_decreases_as_positive_logit_grows() {
        let mut params = tiny_model(2);
        let h = states_from(&array![[2usize, 3]], &params);
        let targets = array![[3usize, 4]];
        let negatives = array![[5usize, 6]];
        let before = next_item_loss(&h, &targets, &negatives, &params).unwrap();
        // Push e_pos toward h at the first valid position.
        let push = h.values.slice(ndarray::s![0, 0, ..]).to_owned();
        let mut row = params.item_embedding.row_mut(3);
        row += &(&push * 0.5);
        let after = next_item_loss(&h, &targets, &negatives, &params).unwrap();
        assert!(after < before);
    }

    #[test]
    fn rejects_negative_equal_to_positive() {
        let params = tiny_model(2);
        let h = states_from(&array![[2usize]], &params);
        let err = next_item_loss(&h, &array![[3usize]], &array![[3usize]], &params);
        assert!(err.is_err());
    }

    #[test]
    fn next_item_gradients_match_fd() {
        let params = tiny_model(7);
        let batch = array![[0usize, 2, 5], [3, 4, 6]];
        let h = states_from(&batch, &params);
        let targets = array![[0usize, 5, 7], [4, 6, 8]];
        let negatives = array![[0usize, 1, 2], [5, 7, 1]];
        let mut grads = params.zeros_like();
        let (loss, dh) =
            next_item_loss_with_grad(&h, &targets, &negatives, &params, &mut grads).unwrap();
        let eps = 1e-6;
        // dh spot checks at valid positions.
        for &(bi, ti, di) in &[(0usize, 1usize, 0usize), (1, 2, 3), (0, 2, 1)] {
            let mut hp = h.clone();
            hp.values[[bi, ti, di]] += eps;
            let mut hm = h.clone();
            hm.values[[bi, ti, di]] -= eps;
            let fd = (next_item_loss(&hp, &targets, &negatives, &params).unwrap()
                - next_item_loss(&hm, &targets, &negatives, &params).unwrap())
                / (2.0 * eps);
            assert!((fd - dh[[bi, ti, di]]).abs() < 1e-8, "dh[{bi},{ti},{di}]");
        }
        // Embedding gradient spot check (item 5 is a target and a negative).
        for &(item, di) in &[(5usize, 0usize), (1, 2), (8, 3)] {
            let mut pp = params.clone();
            pp.item_embedding[[item, di]] += eps;
            let mut pm = params.clone();
            pm.item_embedding[[item, di]] -= eps;
            let fd = (next_item_loss(&h, &targets, &negatives, &pp).unwrap()
                - next_item_loss(&h, &targets, &negatives, &pm).unwrap())
                / (2.0 * eps);
            assert!(
                (fd - grads.item_embedding[[item, di]]).abs() < 1e-8,
                "dE[{item},{di}]"
            );
        }
        assert!(loss.is_finite());
    }

    fn random_reps(b: usize, d: usize, seed: u64) -> Array2<f64> {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed);
        Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_pair_loss_is_exactly_zero() {
        let a = random_reps(1, 6, 1);
        let b = random_reps(1, 6, 2);
        for sim in [ContrastiveSim::Dot, ContrastiveSim::Cosine] {
            let loss = info_nce(&a, &b, 1.3, sim).unwrap();
            assert_eq!(loss, 0.0);
        }
    }

    /// Direct enumeration over the 2B view set with plain softmax math.
    fn brute_force_nce(a: &Array2<f64>, b: &Array2<f64>, tau: f64) -> f64 {
        let bsz = a.nrows();
        let n = 2 * bsz;
        let z = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap();
        let mut total = 0.0;
        for i in 0..n {
            let p = if i < bsz { i + bsz } else { i - bsz };
            let simv = |x: usize, y: usize| {
                z.row(x)
                    .iter()
                    .zip(z.row(y).iter())
                    .map(|(u, v)| u * v)
                    .sum::<f64>()
                    / tau
            };
            let mut denom = 0.0;
            for j in 0..n {
                if j != i {
                    denom += simv(i, j).exp();
                }
            }
            total += -(simv(i, p).exp() / denom).ln();
        }
        total / n as f64
    }

    #[test]
    fn matches_bruteforce_for_small_batches() {
        for bsz in 1..=4 {
            let a = random_reps(bsz, 5, 10 + bsz as u64);
            let b = random_reps(bsz, 5, 20 + bsz as u64);
            for &tau in &[0.5, 1.0, 2.0] {
                let ours = info_nce(&a, &b, tau, ContrastiveSim::Dot).unwrap();
                let oracle = brute_force_nce(&a, &b, tau);
                assert!(
                    (ours - oracle).abs() < 1e-8,
                    "B={bsz} tau={tau}: {ours} vs {oracle}"
                );
                assert!(ours >= 0.0);
            }
        }
    }

    #[test]
    fn permutation_of_pairs_leaves_loss_unchanged() {
        let a = random_reps(5, 4, 3);
        let b = random_reps(5, 4, 4);
        let loss = info_nce(&a, &b, 0.8, ContrastiveSim::Dot).unwrap();
        let perm = [3usize, 1, 4, 0, 2];
        let ap = Array2::from_shape_fn((5, 4), |(i, j)| a[[perm[i], j]]);
        let bp = Array2::from_shape_fn((5, 4), |(i, j)| b[[perm[i], j]]);
        let loss_p = info_nce(&ap, &bp, 0.8, ContrastiveSim::Dot).unwrap();
        assert!((loss - loss_p).abs() < 1e-12);
    }

    #[test]
    fn loss_rises_with_temperature_when_positives_dominate() {
        // Orthogonal unit pairs: positive sim 1, negatives 0.
        let mut a = Array2::zeros((3, 6));
        let mut b = Array2::zeros((3, 6));
        for i in 0..3 {
            a[[i, i]] = 1.0;
            b[[i, i]] = 1.0;
        }
        let mut prev = -1.0;
        for &tau in &[0.25, 0.5, 1.0, 2.0, 4.0] {
            let loss = info_nce(&a, &b, tau, ContrastiveSim::Dot).unwrap();
            assert!(loss > prev, "tau={tau}: {loss} <= {prev}");
            prev = loss;
        }
    }

    #[test]
    fn non_finite_reps_are_rejected() {
        let mut a = random_reps(2, 3, 5);
        a[[0, 1]] = f64::NAN;
        let b = random_reps(2, 3, 6);
        assert!(info_nce(&a, &b, 1.0, ContrastiveSim::Dot).is_err());
    }

    #[test]
    fn info_nce_gradients_match_fd() {
        for sim in [ContrastiveSim::Dot, ContrastiveSim::Cosine] {
            let a = random_reps(3, 4, 31);
            let b = random_reps(3, 4, 32);
            let (loss, da, db) = info_nce_with_grad(&a, &b, 0.9, sim).unwrap();
            assert!(loss > 0.0);
            let eps = 1e-6;
            for i in 0..3 {
                for j in 0..4 {
                    let mut ap = a.clone();
                    ap[[i, j]] += eps;
                    let mut am = a.clone();
                    am[[i, j]] -= eps;
                    let fd = (info_nce(&ap, &b, 0.9, sim).unwrap()
                        - info_nce(&am, &b, 0.9, sim).unwrap())
                        / (2.0 * eps);
                    assert!((fd - da[[i, j]]).abs() < 1e-8, "{sim:?} da[{i},{j}]");

                    let mut bp = b.clone();
                    bp[[i, j]] += eps;
                    let mut bm = b.clone();
                    bm[[i, j]] -= eps;
                    let fd = (info_nce(&a, &bp, 0.9, sim).unwrap()
                        - info_nce(&a, &bm, 0.9, sim).unwrap())
                        / (2.0 * eps);
                    assert!((fd - db[[i, j]]).abs() < 1e-8, "{sim:?} db[{i},{j}]");
                }
            }
        }
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let a = random_reps(4, 5, 41);
        let b = random_reps(4, 5, 42);
        let l1 = info_nce(&a, &b, 1.1, ContrastiveSim::Cosine).unwrap();
        let l2 = info_nce(&(&a * 7.0), &(&b * 0.3), 1.1, ContrastiveSim::Cosine).unwrap();
        assert!((l1 - l2).abs() < 1e-10);
    }

    #[test]
    fn weighted_total_hand_arithmetic() {
        let w = LossWeights::default();
        assert!((total_contrastive(&[1.0, 2.0, 3.0], &w).unwrap() - 0.40).abs() < 1e-12);
        let zero = LossWeights {
            lambdas: vec![0.0; 3],
            temperatures: vec![1.0; 3],
        };
        assert_eq!(total_contrastive(&[5.0, 5.0, 5.0], &zero).unwrap(), 0.0);
        let single = LossWeights {
            lambdas: vec![1.0],
            temperatures: vec![1.0],
        };
        assert_eq!(total_contrastive(&[0.7], &single).unwrap(), 0.7);
        assert!(total_contrastive(&[1.0], &w).is_err());
    }

    #[test]
    fn final_loss_is_plain_sum() {
        assert_eq!(final_loss(0.7, 0.3), 1.0);
        assert_eq!(final_loss(2.5, 0.0), 2.5);
        assert_eq!(final_loss(0.0, 1.5), 1.5);
    }

    #[test]
    fn weight_validation() {
        let w = LossWeights::default();
        assert!(w.validate(3).is_ok());
        assert!(w.validate(2).is_err());
        let bad = LossWeights {
            lambdas: vec![0.1, -0.1, 0.0],
            temperatures: vec![1.0, 1.0, 1.0],
        };
        assert!(bad.validate(3).is_err());
        let bad_tau = LossWeights {
            lambdas: vec![0.1, 0.1, 0.1],
            temperatures: vec![1.0, 0.0, 1.0],
        };
        assert!(bad_tau.validate(3).is_err());
    }

    #[test]
    fn default_weights_have_monotone_equal_gaps() {
        let w = LossWeights::default();
        assert!(is_equal_gap_monotone(&w.lambdas, false));
        assert!(is_equal_gap_monotone(&w.temperatures, true));
        assert!(!is_equal_gap_monotone(&[1.0, 2.0, 4.0], true));
        let w2 = LossWeights::default_for_levels(2);
        assert_eq!(w2.lambdas, vec![0.1, 0.075]);
        let w4 = LossWeights::default_for_levels(4);
        assert_eq!(w4.lambdas.len(), 4);
        assert!(w4.validate(4).is_ok());
    }
}
