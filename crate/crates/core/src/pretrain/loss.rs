//! Contrastive alignment losses between modality representations.

use crate::corpus::Modality;
use crate::error::{Error, Result};
use crate::tensor::{cst, Float, Graph, Reduction, Var};

/// Cosine similarity; 0 when either vector is all zeros.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim("cosine_sim", &[u.len()], &[v.len()]));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Temperature-scaled cosine-similarity logits `[B, B]` between two rep batches.
pub fn similarity_logits<T: Float>(g: &mut Graph<T>, a: Var, b: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let na = g.l2_normalize_rows(a)?;
    let nb = g.l2_normalize_rows(b)?;
    let sim = g.matmul_bt(na, nb)?;
    Ok(g.scale(sim, cst(1.0 / tau)))
}

/// `-Σ_i log softmax_j(sim(a_i, b_j)/τ)[i]`, summed over the batch.
pub fn info_nce<T: Float>(g: &mut Graph<T>, a: Var, b: Var, tau: f64) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(Error::dim("info_nce", &sa, &sb));
    }
    if sa[0] < 2 {
        return Err(Error::Config(format!("contrastive batch needs at least 2 items, got {}", sa[0])));
    }
    let logits = similarity_logits(g, a, b, tau)?;
    let targets: Vec<usize> = (0..sa[0]).collect();
    g.cross_entropy(logits, &targets, None, Reduction::Sum, false)
}

/// Symmetric pairwise loss with its per-pair terms.
pub struct TotalLoss {
    pub loss: Var,
    /// `(a, b, L(a,b) + L(b,a))` for every unordered pair.
    pub pairs: Vec<(Modality, Modality, Var)>,
}

/// `(1 / C(M,2)) Σ_{a<b} [L(a,b) + L(b,a)]` over the given modality reps.
pub fn total_loss<T: Float>(g: &mut Graph<T>, reps: &[(Modality, Var)], tau: f64) -> Result<TotalLoss> {
    let m = reps.len();
    if m < 2 {
        return Err(Error::Config(format!("total loss needs at least 2 modalities, got {m}")));
    }
    let mut pairs = Vec::with_capacity(m * (m - 1) / 2);
    let mut acc: Option<Var> = None;
    for i in 0..m {
        for j in i + 1..m {
            let ab = info_nce(g, reps[i].1, reps[j].1, tau)?;
            let ba = info_nce(g, reps[j].1, reps[i].1, tau)?;
            let both = g.add(ab, ba)?;
            pairs.push((reps[i].0, reps[j].0, both));
            acc = Some(match acc {
                None => both,
                Some(s) => g.add(s, both)?,
            });
        }
    }
    let n_pairs = pairs.len();
    let loss = g.scale(acc.expect("m >= 2"), cst(1.0 / n_pairs as f64));
    Ok(TotalLoss { loss, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tensor};
    use proptest::prelude::*;

    fn eval(reps: &[Tensor<f64>], tau: f64) -> f64 {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, false);
        let mods = Modality::ALL;
        let vars: Vec<_> = reps.iter().enumerate().map(|(i, r)| (mods[i], g.input(r.clone()))).collect();
        let t = total_loss(&mut g, &vars, tau).unwrap();
        g.value(t.loss).item()
    }

    fn nce(a: &Tensor<f64>, b: &Tensor<f64>, tau: f64) -> f64 {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, false);
        let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
        let l = info_nce(&mut g, va, vb, tau).unwrap();
        g.value(l).item()
    }

    /// Direct evaluation of the loss formula without the graph.
    fn nce_oracle(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
        let n = a.len();
        (0..n)
            .map(|i| {
                let logits: Vec<f64> = (0..n).map(|j| cosine_sim(&a[i], &b[j]).unwrap() / tau).collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                -(logits[i].exp() / z).ln()
            })
            .sum()
    }

    #[test]
    fn cosine_reference_points() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_sim(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(cosine_sim(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn analytic_batches() {
        let same = Tensor::new(&[4, 3], [0.3, -0.2, 0.9].repeat(4)).unwrap();
        assert!((nce(&same, &same, 1.0) - 4.0 * 4f64.ln()).abs() < 1e-12);
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let eye = Tensor::new(&[4, 4], eye).unwrap();
        let e = std::f64::consts::E;
        assert!((nce(&eye, &eye, 1.0) - 4.0 * -(e / (e + 3.0)).ln()).abs() < 1e-12);
        assert!((eval(&[same.clone(), same.clone(), same], 1.0) - 8.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, false);
        let a = g.input(Tensor::full(&[1, 3], 1.0));
        assert!(matches!(info_nce(&mut g, a, a, 1.0), Err(Error::Config(_))));
        assert!(matches!(info_nce(&mut g, a, a, 0.0), Err(Error::Config(_) | Error::Parameter(_))));
    }

    #[test]
    fn pair_count_is_binomial() {
        let store = ParamStore::<f64>::new();
        for m in 2..=4 {
            let mut g = Graph::new(&store, false);
            let reps: Vec<_> = Modality::ALL[..m].iter().map(|&md| (md, g.input(Tensor::full(&[3, 2], 1.0)))).collect();
            assert_eq!(total_loss(&mut g, &reps, 1.0).unwrap().pairs.len(), m * (m - 1) / 2);
        }
    }

    fn batch(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, d), n)
    }

    fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::new(&[rows.len(), rows[0].len()], rows.concat()).unwrap()
    }

    proptest! {
        #[test]
        fn matches_oracle_and_is_nonnegative(a in batch(5, 4), b in batch(5, 4), tau in 0.1f64..2.0) {
            let l = nce(&tensor(&a), &tensor(&b), tau);
            prop_assert!(l >= 0.0);
            prop_assert!((l - nce_oracle(&a, &b, tau)).abs() < 1e-9 * (1.0 + l));
        }

        #[test]
        fn positive_scaling_is_invisible(a in batch(4, 3), b in batch(4, 3), s in 0.1f64..10.0) {
            let scaled: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
            let l1 = nce(&tensor(&a), &tensor(&b), 1.0);
            let l2 = nce(&tensor(&scaled), &tensor(&b), 1.0);
            prop_assert!((l1 - l2).abs() < 1e-9);
        }

        #[test]
        fn relabeling_and_modality_order(a in batch(4, 3), b in batch(4, 3), c in batch(4, 3), shift in 1usize..4) {
            let rot = |x: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { (0..x.len()).map(|i| x[(i + shift) % x.len()].clone()).collect() };
            let l = nce(&tensor(&a), &tensor(&b), 1.0);
            prop_assert!((l - nce(&tensor(&rot(&a)), &tensor(&rot(&b)), 1.0)).abs() < 1e-9);
            let t1 = eval(&[tensor(&a), tensor(&b), tensor(&c)], 1.0);
            let t2 = eval(&[tensor(&c), tensor(&a), tensor(&b)], 1.0);
            prop_assert!((t1 - t2).abs() < 1e-9);
        }
    }
}
