//! Centered orthonormal DFTs and spectral filtering.
//!
//! The centered layout places frequency `f` of an axis of length `n` at
//! index `f + n/2` (integer division), i.e. the DC bin sits at `n/2`.
//! Filters are stored centered and converted to the unshifted FFT layout
//! internally, which is equivalent to shifting the data.

use num_complex::Complex;
use rustfft::FftPlanner;

use super::{tensor::strides, Backward, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// In-place unnormalised FFT over the trailing `dims` of a batch of arrays.
pub fn fft_nd<T: Real>(buf: &mut [Complex<T>], dims: &[usize], inverse: bool) {
    let n: usize = dims.iter().product();
    assert!(n > 0 && buf.len() % n == 0);
    let mut planner = FftPlanner::<T>::new();
    let mut scratch = Vec::new();
    let st = strides(dims);
    for (a, &len) in dims.iter().enumerate() {
        if len == 1 {
            continue;
        }
        let fft = if inverse { planner.plan_fft_inverse(len) } else { planner.plan_fft_forward(len) };
        let stride = st[a];
        if stride == 1 {
            fft.process(buf);
            continue;
        }
        // gather lines of this axis contiguously, transform, scatter back
        let block = len * stride;
        scratch.clear();
        scratch.reserve(buf.len());
        for b in buf.chunks_exact(block) {
            for s in 0..stride {
                scratch.extend((0..len).map(|i| b[s + i * stride]));
            }
        }
        fft.process(&mut scratch);
        let mut it = scratch.iter();
        for b in buf.chunks_exact_mut(block) {
            for s in 0..stride {
                for i in 0..len {
                    b[s + i * stride] = *it.next().unwrap();
                }
            }
        }
    }
}

/// For each unshifted flat index, the matching centered flat index.
pub fn centered_index(dims: &[usize]) -> Vec<usize> {
    let n: usize = dims.iter().product();
    let st = strides(dims);
    (0..n)
        .map(|j| {
            dims.iter()
                .zip(&st)
                .map(|(&len, &s)| {
                    let u = (j / s) % len;
                    ((u + len / 2) % len) * s
                })
                .sum()
        })
        .collect()
}

/// Flat index of the bin at frequency `-f` for a centered-layout bin.
pub fn mirror_index(dims: &[usize], i: usize) -> usize {
    let st = strides(dims);
    dims.iter()
        .zip(&st)
        .map(|(&len, &s)| {
            let c = (i / s) % len;
            ((2 * (len / 2) + len - c) % len) * s
        })
        .sum()
}

/// Signed frequency (in bins) of every axis at centered flat index `i`.
pub fn frequency_of(dims: &[usize], i: usize) -> Vec<f64> {
    let st = strides(dims);
    dims.iter().zip(&st).map(|(&len, &s)| ((i / s) % len) as f64 - (len / 2) as f64).collect()
}

/// Spectrum of a channel-last field, per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum<T> {
    pub spatial: Vec<usize>,
    pub channels: usize,
    /// Channel-last, same layout as the originating field.
    pub values: Vec<Complex<T>>,
    pub dc_centered: bool,
}

fn to_channel_first<T: Real>(x: &[T], c: usize) -> Vec<Complex<T>> {
    let n = x.len() / c;
    let mut out = vec![Complex::new(T::zero(), T::zero()); x.len()];
    for p in 0..n {
        for k in 0..c {
            out[k * n + p] = Complex::new(x[p * c + k], T::zero());
        }
    }
    out
}

fn check_field<T: Real>(x: &Tensor<T>) -> Result<(Vec<usize>, usize)> {
    let sp = x.spatial().to_vec();
    if !(2..=3).contains(&sp.len()) || sp.iter().any(|&d| d < 2) {
        return Err(Error::shape(format!("centered DFT needs 2 or 3 spatial axes of length >= 2, got {:?}", x.shape())));
    }
    if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("element {i} of DFT input")));
    }
    Ok((sp, x.channels()))
}

/// Orthonormal DFT over the spatial axes with the DC bin moved to the center.
pub fn dft_centered<T: Real>(x: &Tensor<T>) -> Result<ComplexSpectrum<T>> {
    let (sp, c) = check_field(x)?;
    let n: usize = sp.iter().product();
    let mut buf = to_channel_first(x.data(), c);
    fft_nd(&mut buf, &sp, false);
    let norm = T::one() / T::lit(n as f64).sqrt();
    let cidx = centered_index(&sp);
    let mut values = vec![Complex::new(T::zero(), T::zero()); n * c];
    for k in 0..c {
        for (j, &ci) in cidx.iter().enumerate() {
            values[ci * c + k] = buf[k * n + j] * norm;
        }
    }
    Ok(ComplexSpectrum { spatial: sp, channels: c, values, dc_centered: true })
}

/// Complex inverse of [`dft_centered`], channel-last.
pub fn idft_centered<T: Real>(s: &ComplexSpectrum<T>) -> Result<Vec<Complex<T>>> {
    if !s.dc_centered {
        return Err(Error::invalid("spectrum is not DC-centered"));
    }
    let n: usize = s.spatial.iter().product();
    if s.values.len() != n * s.channels {
        return Err(Error::shape(format!(
            "spectrum holds {} values, expected {:?} x {}",
            s.values.len(),
            s.spatial,
            s.channels
        )));
    }
    let c = s.channels;
    let cidx = centered_index(&s.spatial);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n * c];
    for k in 0..c {
        for (j, &ci) in cidx.iter().enumerate() {
            buf[k * n + j] = s.values[ci * c + k];
        }
    }
    fft_nd(&mut buf, &s.spatial, true);
    let norm = T::one() / T::lit(n as f64).sqrt();
    let mut out = vec![Complex::new(T::zero(), T::zero()); n * c];
    for k in 0..c {
        for p in 0..n {
            out[p * c + k] = buf[k * n + p] * norm;
        }
    }
    Ok(out)
}

/// Real part of the inverse centered DFT.
pub fn idft_centered_real<T: Real>(s: &ComplexSpectrum<T>) -> Result<Tensor<T>> {
    let z = idft_centered(s)?;
    let mut shape = s.spatial.clone();
    shape.push(s.channels);
    Ok(Tensor::new(&shape, z.iter().map(|v| v.re).collect()))
}

/// Max |imag| of the inverse transform relative to max |real|.
pub fn imaginary_residue<T: Real>(s: &ComplexSpectrum<T>) -> Result<f64> {
    let z = idft_centered(s)?;
    let re = z.iter().fold(0.0f64, |m, v| m.max(v.re.as_f64().abs()));
    let im = z.iter().fold(0.0f64, |m, v| m.max(v.im.as_f64().abs()));
    Ok(if re > 0.0 { im / re } else { im })
}

/// Fails when the inverse transform of `s` is not real within `tol`.
pub fn check_real_inverse<T: Real>(s: &ComplexSpectrum<T>, tol: f64) -> Result<()> {
    let r = imaginary_residue(s)?;
    if r < tol {
        Ok(())
    } else {
        Err(Error::data(format!("spectrum is not Hermitian: imaginary residue {r:.3e} exceeds {tol:.1e}")))
    }
}

/// Spatial part of the filtering pipeline: forward transform of every
/// channel (channel-first, unshifted, unnormalised).
fn forward_channels<T: Real>(x: &Tensor<T>, sp: &[usize]) -> Vec<Complex<T>> {
    let mut buf = to_channel_first(x.data(), x.channels());
    fft_nd(&mut buf, sp, false);
    buf
}

fn inverse_real<T: Real>(mut buf: Vec<Complex<T>>, sp: &[usize], c: usize) -> Vec<T> {
    let n: usize = sp.iter().product();
    fft_nd(&mut buf, sp, true);
    let inv = T::one() / T::lit(n as f64);
    let mut out = vec![T::zero(); n * c];
    for k in 0..c {
        for p in 0..n {
            out[p * c + k] = buf[k * n + p].re * inv;
        }
    }
    out
}

struct FilterOp<T> {
    spectrum: Vec<Complex<T>>,
    mask_u: Vec<T>,
}

impl<T: Real> Backward<T> for FilterOp<T> {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, need: &[bool]) -> Vec<Option<Tensor<T>>> {
        let sp = x[1].shape().to_vec();
        let c = x[0].channels();
        let n: usize = sp.iter().product();
        let gs = forward_channels(g, &sp);
        let gx = need[0].then(|| {
            let mut b = gs.clone();
            for (i, v) in b.iter_mut().enumerate() {
                *v = *v * self.mask_u[i % n];
            }
            Tensor::new(x[0].shape(), inverse_real(b, &sp, c))
        });
        let gm = need[1].then(|| {
            let cidx = centered_index(&sp);
            let inv = T::one() / T::lit(n as f64);
            let mut d = vec![T::zero(); n];
            for k in 0..c {
                for (j, &ci) in cidx.iter().enumerate() {
                    let a = self.spectrum[k * n + j];
                    let b = gs[k * n + j];
                    d[ci] = d[ci] + (a.re * b.re + a.im * b.im) * inv;
                }
            }
            Tensor::new(&sp, d)
        });
        vec![gx, gm]
    }
}

/// `Re(idft_centered(dft_centered(x) * mask))` with a real centered mask
/// broadcast over channels. `x: [s.., C]`, `mask: [s..]`.
pub fn spectral_filter<T: Real>(g: &mut Graph<T>, x: Var, mask: Var) -> Var {
    let sp = g.value(mask).shape().to_vec();
    assert_eq!(g.value(x).spatial(), &sp[..], "mask shape {:?} does not match field {:?}", sp, g.value(x).shape());
    let c = g.value(x).channels();
    let n: usize = sp.iter().product();
    let cidx = centered_index(&sp);
    let m = g.value(mask).data();
    let mask_u: Vec<T> = cidx.iter().map(|&ci| m[ci]).collect();
    let spectrum = forward_channels(g.value(x), &sp);
    let mut b = spectrum.clone();
    for (i, v) in b.iter_mut().enumerate() {
        *v = *v * mask_u[i % n];
    }
    let out = Tensor::new(g.value(x).shape(), inverse_real(b, &sp, c));
    g.record(out, &[x, mask], FilterOp { spectrum, mask_u })
}

struct GaussOp<T> {
    gauss: Vec<T>,
    r2: Vec<T>,
}

impl<T: Real> Backward<T> for GaussOp<T> {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let scale = x[0].data()[0];
        let sigma = x[1].data()[0];
        let s3 = sigma * sigma * sigma;
        let mut ds = T::zero();
        let mut dsig = T::zero();
        for ((&gi, &e), &r2) in g.data().iter().zip(&self.gauss).zip(&self.r2) {
            ds = ds + gi * e;
            dsig = dsig + gi * scale * e * r2 / s3;
        }
        vec![Some(Tensor::scalar(ds)), Some(Tensor::scalar(dsig))]
    }
}

/// Centered Gaussian `scale * exp(-|f|^2 / (2 sigma^2))` over frequency bins;
/// the DC bin carries exactly `scale`.
pub fn gaussian_mask<T: Real>(g: &mut Graph<T>, scale: Var, sigma: Var, dims: &[usize]) -> Var {
    let s = g.value(scale).data()[0];
    let sigma_v = g.value(sigma).data()[0];
    let n: usize = dims.iter().product();
    let two_s2 = T::lit(2.0) * sigma_v * sigma_v;
    let r2: Vec<T> =
        (0..n).map(|i| T::lit(frequency_of(dims, i).iter().map(|f| f * f).sum::<f64>())).collect();
    let gauss: Vec<T> = r2.iter().map(|&r| (-r / two_s2).exp()).collect();
    let out = Tensor::new(dims, gauss.iter().map(|&e| s * e).collect());
    g.record(out, &[scale, sigma], GaussOp { gauss, r2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck::grad_check, ops};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// O(N^2) centered DFT by direct summation (single channel, 2-d).
    fn direct_centered_dft(x: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
        let n = (h * w) as f64;
        let mut out = vec![Complex::new(0.0, 0.0); h * w];
        for ci in 0..h {
            for cj in 0..w {
                let (fu, fv) = (ci as f64 - (h / 2) as f64, cj as f64 - (w / 2) as f64);
                let mut s = Complex::new(0.0, 0.0);
                for a in 0..h {
                    for b in 0..w {
                        let ph = -2.0 * PI * (fu * a as f64 / h as f64 + fv * b as f64 / w as f64);
                        s += Complex::new(ph.cos(), ph.sin()) * x[a * w + b];
                    }
                }
                out[ci * w + cj] = s / n.sqrt();
            }
        }
        out
    }

    #[test]
    fn constant_field_has_single_dc_bin() {
        let x = Tensor::full(&[4, 6, 1], 2.5);
        let s = dft_centered(&x).unwrap();
        let dc = 2 * 6 + 3;
        assert!((s.values[dc].re - 2.5 * 24f64.sqrt()).abs() < 1e-12);
        for (i, v) in s.values.iter().enumerate() {
            if i != dc {
                assert!(v.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_direct_summation() {
        let x = rand_t(&[8, 8, 1], 3);
        let s = dft_centered(&x).unwrap();
        let want = direct_centered_dft(x.data(), 8, 8);
        for (a, b) in s.values.iter().zip(&want) {
            assert!((a - b).norm() < 1e-6);
        }
        let x = rand_t(&[5, 6, 1], 4);
        let s = dft_centered(&x).unwrap();
        let want = direct_centered_dft(x.data(), 5, 6);
        for (a, b) in s.values.iter().zip(&want) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        for shape in [[8usize, 8, 3, 2].as_slice(), &[5, 7, 2], &[4, 6, 4, 1]] {
            let x = rand_t(shape, 5);
            let s = dft_centered(&x).unwrap();
            let e: f64 = s.values.iter().map(|v| v.norm_sqr()).sum();
            assert!((e - x.sq_norm()).abs() < 1e-10 * x.sq_norm());
            let y = idft_centered_real(&s).unwrap();
            assert!(y.max_abs_diff(&x) < 1e-5 * x.max_abs());
            assert!(imaginary_residue(&s).unwrap() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(dft_centered(&Tensor::<f64>::zeros(&[1, 4, 1])), Err(Error::Shape(_))));
        let mut x = Tensor::<f64>::zeros(&[4, 4, 1]);
        x.data_mut()[3] = f64::NAN;
        assert!(matches!(dft_centered(&x), Err(Error::NonFinite(_))));
        let mut s = dft_centered(&Tensor::<f64>::zeros(&[4, 4, 1])).unwrap();
        s.values.pop();
        assert!(matches!(idft_centered_real(&s), Err(Error::Shape(_))));
    }

    #[test]
    fn symmetric_mask_keeps_output_real_and_asymmetric_bin_is_flagged() {
        let x = rand_t(&[8, 8, 1], 6);
        let mut s = dft_centered(&x).unwrap();
        for (i, v) in s.values.iter_mut().enumerate() {
            let f = frequency_of(&[8, 8], i);
            *v *= (-(f[0] * f[0] + f[1] * f[1]) / 8.0).exp();
        }
        assert!(check_real_inverse(&s, 1e-5).is_ok());
        s.values[3 * 8 + 5] += Complex::new(0.0, 2.0);
        assert!(check_real_inverse(&s, 1e-5).is_err());
    }

    #[test]
    fn mirror_maps_frequency_to_negative() {
        for dims in [[8usize, 6].as_slice(), &[5, 4, 3]] {
            let n: usize = dims.iter().product();
            for i in 0..n {
                let m = mirror_index(dims, i);
                assert_eq!(mirror_index(dims, m), i);
                let (f, g) = (frequency_of(dims, i), frequency_of(dims, m));
                for ((a, b), &len) in f.iter().zip(&g).zip(dims) {
                    assert_eq!(((a + b) as i64).rem_euclid(len as i64), 0);
                }
            }
        }
    }

    #[test]
    fn filter_gradients() {
        let inputs = vec![rand_t(&[6, 8, 2], 7), Tensor::scalar(0.8), Tensor::scalar(1.7), rand_t(&[6, 8, 2], 8)];
        let err = grad_check(
            |g, v| {
                let m = gaussian_mask(g, v[1], v[2], &[6, 8]);
                let lo = spectral_filter(g, v[0], m);
                let y = ops::mul(g, lo, v[3]);
                ops::sum(g, y)
            },
            &inputs,
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }
}
