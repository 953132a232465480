use super::{Backward, Graph, Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

struct LayerNormOp<T> {
    normed: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Real> Backward<T> for LayerNormOp<T> {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let c = x[0].channels();
        let gamma = x[1].data();
        let cf = T::lit(c as f64);
        let mut gx = n[0].then(|| vec![T::zero(); x[0].numel()]);
        let mut gg = vec![T::zero(); c];
        let mut gb = vec![T::zero(); c];
        let mut dn = vec![T::zero(); c];
        for (r, (grow, nrow)) in g.data().chunks_exact(c).zip(self.normed.chunks_exact(c)).enumerate() {
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for k in 0..c {
                gg[k] = gg[k] + grow[k] * nrow[k];
                gb[k] = gb[k] + grow[k];
                dn[k] = grow[k] * gamma[k];
                s1 = s1 + dn[k];
                s2 = s2 + dn[k] * nrow[k];
            }
            if let Some(gx) = gx.as_mut() {
                let inv = self.inv_std[r] / cf;
                for k in 0..c {
                    gx[r * c + k] = inv * (cf * dn[k] - s1 - nrow[k] * s2);
                }
            }
        }
        vec![
            gx.map(|d| Tensor::new(x[0].shape(), d)),
            n[1].then(|| Tensor::new(&[c], gg)),
            n[2].then(|| Tensor::new(&[c], gb)),
        ]
    }
}

/// Normalises each feature vector (last axis) to zero mean and unit
/// variance, then applies the per-channel affine `gamma`, `beta`.
pub fn layer_norm<T: Real>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Var {
    let xs = g.value(x);
    let c = xs.channels();
    let cf = T::lit(c as f64);
    let eps = T::lit(LN_EPS);
    let rows = xs.numel() / c;
    let mut normed = Vec::with_capacity(xs.numel());
    let mut inv_std = Vec::with_capacity(rows);
    for row in xs.data().chunks_exact(c) {
        let mu = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cf;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        normed.extend(row.iter().map(|&v| (v - mu) * inv));
    }
    let (ga, be) = (g.value(gamma).data(), g.value(beta).data());
    let out: Vec<T> = normed.iter().enumerate().map(|(i, &v)| v * ga[i % c] + be[i % c]).collect();
    let v = Tensor::new(xs.shape(), out);
    g.record(v, &[x, gamma, beta], LayerNormOp { normed, inv_std })
}
