//! Quantized CDF tables and latent symbol coding with an escape for values
//! outside `[-127, 127]`.

use super::rangecoder::{Decoder, Encoder, PRECISION};
use super::Cdf;
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const SYMBOL_MAX: i32 = 127;
pub const ALPHABET: usize = 2 * SYMBOL_MAX as usize + 2;
pub const ESCAPE: usize = ALPHABET - 1;
const TOTAL: u32 = 1 << PRECISION;

/// 16-bit frequency table of one channel; every symbol has frequency ≥ 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    pub freq: Vec<u32>,
    pub cum: Vec<u32>,
}

impl CdfTable {
    /// `pmf[i]` is the probability of value `i - 127`, `pmf[ESCAPE]` the tail
    /// mass.
    pub fn from_pmf(pmf: &[f64]) -> Self {
        assert_eq!(pmf.len(), ALPHABET);
        let mut freq: Vec<i64> = pmf.iter().map(|&p| ((p.max(0.0) * TOTAL as f64).round() as i64).max(1)).collect();
        let mut diff = TOTAL as i64 - freq.iter().sum::<i64>();
        let mut order: Vec<usize> = (0..ALPHABET).collect();
        order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
        if diff > 0 {
            freq[order[0]] += diff;
        } else {
            for &i in &order {
                if diff == 0 {
                    break;
                }
                let take = (freq[i] - 1).min(-diff);
                freq[i] -= take;
                diff += take;
            }
        }
        let freq: Vec<u32> = freq.into_iter().map(|f| f as u32).collect();
        let mut cum = Vec::with_capacity(ALPHABET + 1);
        let mut acc = 0;
        cum.push(0);
        for &f in &freq {
            acc += f;
            cum.push(acc);
        }
        debug_assert_eq!(acc, TOTAL);
        Self { freq, cum }
    }

    pub fn from_density(d: &dyn Cdf, channel: usize) -> Self {
        let lo = SYMBOL_MAX as f64 + 0.5;
        let mut pmf: Vec<f64> = (-SYMBOL_MAX..=SYMBOL_MAX).map(|v| d.pmf(channel, v)).collect();
        pmf.push(d.cdf(channel, -lo) + (1.0 - d.cdf(channel, lo)));
        Self::from_pmf(&pmf)
    }

    fn symbol_for(&self, v: u32) -> usize {
        self.cum.partition_point(|&c| c <= v) - 1
    }
}

/// Tables for every channel of a stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTables(pub Vec<CdfTable>);

impl CdfTables {
    pub fn from_density(d: &dyn Cdf) -> Self {
        Self((0..d.channels()).map(|k| CdfTable::from_density(d, k)).collect())
    }
}

fn encode_escape(e: &mut Encoder, v: i32) {
    e.encode_bits((v < 0) as u32, 1);
    // order-0 exp-Golomb of |v| - 128
    let n = (v.unsigned_abs() - SYMBOL_MAX as u32 - 1) as u64 + 1;
    let k = 63 - n.leading_zeros();
    for _ in 0..k {
        e.encode_bits(1, 1);
    }
    e.encode_bits(0, 1);
    let rest = n - (1 << k);
    let mut left = k;
    while left > 0 {
        let take = left.min(16);
        left -= take;
        e.encode_bits(((rest >> left) & ((1 << take) - 1)) as u32, take);
    }
}

fn decode_escape(d: &mut Decoder) -> Result<i32> {
    let neg = d.decode_bits(1)? == 1;
    let mut k = 0;
    while d.decode_bits(1)? == 1 {
        k += 1;
        if k > 31 {
            return Err(Error::data(format!("corrupt escape code near offset {}", d.position())));
        }
    }
    let mut rest: u64 = 0;
    let mut left = k;
    while left > 0 {
        let take = left.min(16);
        left -= take;
        rest = (rest << take) | d.decode_bits(take)? as u64;
    }
    let m = (1u64 << k) + rest - 1 + SYMBOL_MAX as u64 + 1;
    let m = i32::try_from(m).map_err(|_| Error::data(format!("escaped value overflows near offset {}", d.position())))?;
    Ok(if neg { -m } else { m })
}

/// Codes latents `[.., C_p]` in order, element by element; the channel of
/// list entry `p` maps to table `offsets[p] + c`.
pub fn ec_encode(latents: &[&Tensor<i32>], offsets: &[usize], tables: &CdfTables) -> Result<Vec<u8>> {
    let mut e = Encoder::new();
    for (t, &off) in latents.iter().zip(offsets) {
        let c = t.channels();
        if off + c > tables.0.len() {
            return Err(Error::model(format!("{} CDF tables, latents need {}", tables.0.len(), off + c)));
        }
        for (i, &v) in t.data().iter().enumerate() {
            let tab = &tables.0[off + i % c];
            let s = if v.abs() <= SYMBOL_MAX { (v + SYMBOL_MAX) as usize } else { ESCAPE };
            e.encode(tab.cum[s], tab.freq[s]);
            if s == ESCAPE {
                encode_escape(&mut e, v);
            }
        }
    }
    Ok(e.finish())
}

/// Inverse of [`ec_encode`] for the given shapes.
pub fn ec_decode(bytes: &[u8], shapes: &[Vec<usize>], offsets: &[usize], tables: &CdfTables) -> Result<Vec<Tensor<i32>>> {
    let mut d = Decoder::new(bytes)?;
    let mut out = Vec::with_capacity(shapes.len());
    for (shape, &off) in shapes.iter().zip(offsets) {
        let c = *shape.last().ok_or_else(|| Error::data("empty latent shape"))?;
        if off + c > tables.0.len() {
            return Err(Error::model(format!("{} CDF tables, latents need {}", tables.0.len(), off + c)));
        }
        let n: usize = shape.iter().product();
        let mut vals = Vec::with_capacity(n);
        for i in 0..n {
            let tab = &tables.0[off + i % c];
            let (v, r) = d.peek()?;
            let s = tab.symbol_for(v);
            d.consume(r, tab.cum[s], tab.freq[s])?;
            vals.push(if s == ESCAPE { decode_escape(&mut d)? } else { s as i32 - SYMBOL_MAX });
        }
        out.push(Tensor::new(shape, vals));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::{rate_bits, FactorizedDensity};
    use crate::nn::layers::ParamBuilder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Discretized Laplacian with per-channel scale.
    struct Laplace(Vec<f64>);
    impl Cdf for Laplace {
        fn channels(&self) -> usize {
            self.0.len()
        }
        fn cdf(&self, k: usize, x: f64) -> f64 {
            let b = self.0[k];
            if x < 0.0 {
                0.5 * (x / b).exp()
            } else {
                1.0 - 0.5 * (-x / b).exp()
            }
        }
    }

    fn sample(d: &dyn Cdf, k: usize, rng: &mut ChaCha8Rng) -> i32 {
        let u: f64 = rng.gen();
        let mut lo = -100_000i32;
        let mut hi = 100_000i32;
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if d.cdf(k, mid as f64 + 0.5) >= u {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        lo
    }

    #[test]
    fn table_invariants() {
        let d = Laplace(vec![0.01, 1.0, 30.0, 500.0]);
        for k in 0..4 {
            let t = CdfTable::from_density(&d, k);
            assert_eq!(*t.cum.last().unwrap(), TOTAL);
            assert!(t.freq.iter().all(|&f| f >= 1));
            assert!(t.cum.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn escape_values_round_trip() {
        let d = Laplace(vec![2.0]);
        let tabs = CdfTables::from_density(&d);
        let vals = vec![0, 127, -127, 128, -128, 129, 1000, -70000, i32::MAX - 1, -(i32::MAX - 1), 5];
        let t = Tensor::new(&[vals.len(), 1], vals.clone());
        let bytes = ec_encode(&[&t], &[0], &tabs).unwrap();
        let back = ec_decode(&bytes, &[vec![vals.len(), 1]], &[0], &tabs).unwrap();
        assert_eq!(back[0].data(), &vals[..]);
    }

    #[test]
    fn random_symbols_round_trip_and_match_rate() {
        let d = Laplace(vec![0.7, 3.0, 12.0]);
        let tabs = CdfTables::from_density(&d);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let n = 3000 + trial * 100;
            let t = Tensor::from_fn(&[n, 3], |i| sample(&d, i % 3, &mut rng));
            let bytes = ec_encode(&[&t], &[0], &tabs).unwrap();
            let back = ec_decode(&bytes, &[vec![n, 3]], &[0], &tabs).unwrap();
            assert_eq!(back[0], t);
            let est = rate_bits(&t, &d, 0).unwrap();
            let got = bytes.len() as f64 * 8.0;
            assert!(got <= est * 1.02 + 256.0 && got >= est * 0.98, "trial {trial}: {got} vs {est}");
        }
    }

    #[test]
    fn learned_density_round_trip() {
        let mut pb = ParamBuilder::new(7);
        let fd = FactorizedDensity::new(&mut pb, "d", 6, 10.0);
        let ps = pb.finish();
        let frozen = fd.freeze(&ps);
        let tabs = CdfTables::from_density(&frozen);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::from_fn(&[10, 10, 3], |i| sample(&frozen, i % 3, &mut rng));
        let b = Tensor::from_fn(&[5, 2, 3], |i| sample(&frozen, 3 + i % 3, &mut rng));
        let bytes = ec_encode(&[&a, &b], &[0, 3], &tabs).unwrap();
        let back = ec_decode(&bytes, &[vec![10, 10, 3], vec![5, 2, 3]], &[0, 3], &tabs).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn zeros_under_peaked_density_compress_well() {
        let d = Laplace(vec![0.05]);
        let tabs = CdfTables::from_density(&d);
        let t = Tensor::new(&[10000, 1], vec![0; 10000]);
        let bytes = ec_encode(&[&t], &[0], &tabs).unwrap();
        assert!(bytes.len() < 100, "{}", bytes.len());
    }

    #[test]
    fn truncated_stream_fails_or_differs() {
        let d = Laplace(vec![5.0]);
        let tabs = CdfTables::from_density(&d);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::from_fn(&[4000, 1], |_| sample(&d, 0, &mut rng));
        let bytes = ec_encode(&[&t], &[0], &tabs).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        match ec_decode(cut, &[vec![4000, 1]], &[0], &tabs) {
            Err(e) => assert!(e.to_string().contains("offset"), "{e}"),
            Ok(v) => assert_ne!(v[0], t),
        }
    }
}
