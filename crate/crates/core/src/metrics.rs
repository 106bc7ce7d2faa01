//! Enhancement quality metrics against known references.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::stft::StftTensor;

/// Gains above this are reported as this value.
pub const DRR_GAIN_CAP_DB: f64 = 60.0;
/// Minimum normalised cross-correlation peak for a valid alignment.
pub const ALIGNMENT_THRESHOLD: f64 = 0.1;
pub const SEGSNR_MIN_DB: f64 = -10.0;
pub const SEGSNR_MAX_DB: f64 = 35.0;

/// Mean squared magnitude difference. A single-channel reference is
/// compared against every channel of the estimate.
pub fn metric_stft_mse<T: Real>(estimate: &StftTensor<T>, reference: &StftTensor<T>) -> Result<f64> {
    if estimate.frames() != reference.frames()
        || estimate.bins() != reference.bins()
        || !(reference.channels() == estimate.channels() || reference.channels() == 1)
    {
        return Err(Error::ShapeMismatch(format!(
            "estimate {}x{}x{} vs reference {}x{}x{}",
            estimate.frames(),
            estimate.bins(),
            estimate.channels(),
            reference.frames(),
            reference.bins(),
            reference.channels()
        )));
    }
    let m = estimate.channels();
    let mut acc = 0.0;
    for t in 0..estimate.frames() {
        for b in 0..estimate.bins() {
            let r = reference.cell(t, b);
            for (k, e) in estimate.cell(t, b).iter().enumerate() {
                let rv = if r.len() == 1 { r[0] } else { r[k] };
                let d = e.norm().as_f64() - rv.norm().as_f64();
                acc += d * d;
            }
        }
    }
    Ok(acc / (estimate.frames() * estimate.bins() * m) as f64)
}

/// Full cross-correlation `c[k] = sum_n z[n + k] s[n]` for `k` in `0..=max_lag`.
fn cross_correlation(z: &[f64], s: &[f64], max_lag: usize) -> Vec<f64> {
    let n = (z.len() + s.len()).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |x: &[f64]| {
        let mut v: Vec<Complex<f64>> = x.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        v
    };
    let (mut a, mut b) = (pad(z), pad(s));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v.conj();
    }
    inv.process(&mut a);
    (0..=max_lag.min(z.len().saturating_sub(1))).map(|k| a[k].re / n as f64).collect()
}

/// Ratio in dB of the energy of the best lag-aligned scaled copy of `s`
/// inside `z` to the energy of what remains.
fn coherent_ratio_db(z: &[f64], s: &[f64], max_lag: usize) -> Result<f64> {
    let es: f64 = s.iter().map(|v| v * v).sum();
    let ez: f64 = z.iter().map(|v| v * v).sum();
    if es == 0.0 || ez == 0.0 {
        return Err(Error::AlignmentFailed { peak: 0.0, threshold: ALIGNMENT_THRESHOLD });
    }
    let c = cross_correlation(z, s, max_lag);
    let (lag, peak) = c
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |best, (k, &v)| if v.abs() > best.1.abs() { (k, v) } else { best });
    let shifted_energy: f64 = s[..s.len().min(z.len() - lag)].iter().map(|v| v * v).sum();
    let normalised = peak.abs() / (ez * shifted_energy).sqrt().max(f64::MIN_POSITIVE);
    if normalised < ALIGNMENT_THRESHOLD {
        return Err(Error::AlignmentFailed { peak: normalised, threshold: ALIGNMENT_THRESHOLD });
    }
    let alpha = peak / shifted_energy;
    let mut coherent = 0.0;
    let mut residual = 0.0;
    for (n, &zv) in z.iter().enumerate() {
        let sv = if n >= lag && n - lag < s.len() { alpha * s[n - lag] } else { 0.0 };
        coherent += sv * sv;
        residual += (zv - sv) * (zv - sv);
    }
    if residual <= coherent * 10f64.powf(-DRR_GAIN_CAP_DB / 10.0) {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (coherent / residual).log10())
}

/// Improvement of the dry-coherent-to-residual energy ratio of channel 0
/// of `enhanced` over channel 0 of `observed`, in dB, capped at
/// [`DRR_GAIN_CAP_DB`]. `max_lag` bounds the alignment search and is
/// normally the room response length.
pub fn metric_drr_gain<T: Real>(
    enhanced: &AudioBuffer<T>,
    observed: &AudioBuffer<T>,
    dry: &AudioBuffer<T>,
    max_lag: usize,
) -> Result<f64> {
    let f = |a: &AudioBuffer<T>| -> Vec<f64> { a.channel(0).iter().map(|v| v.as_f64()).collect() };
    let (e, o, s) = (f(enhanced), f(observed), f(dry));
    let re = coherent_ratio_db(&e, &s, max_lag)?;
    let ro = coherent_ratio_db(&o, &s, max_lag)?;
    if re == f64::INFINITY && ro == f64::INFINITY {
        return Ok(0.0);
    }
    if re == f64::INFINITY {
        return Ok(DRR_GAIN_CAP_DB);
    }
    if ro == f64::INFINITY {
        return Ok(-DRR_GAIN_CAP_DB);
    }
    Ok((re - ro).min(DRR_GAIN_CAP_DB))
}

/// Mean per-frame SNR over non-overlapping frames of channel 0, each
/// clamped to `[-10, 35]` dB. Frames whose clean energy is more than
/// 40 dB below the loudest clean frame are skipped.
pub fn metric_segsnr<T: Real>(enhanced: &[T], clean: &[T], frame_len: usize) -> Result<f64> {
    if frame_len == 0 {
        return Err(Error::InvalidConfig("frame_len must be > 0".into()));
    }
    if enhanced.len() != clean.len() {
        return Err(Error::ShapeMismatch(format!("lengths {} and {}", enhanced.len(), clean.len())));
    }
    let frames = clean.len() / frame_len;
    if frames == 0 {
        return Err(Error::SignalTooShort { len: clean.len(), fft_size: frame_len });
    }
    let mut clean_e = vec![0.0; frames];
    let mut err_e = vec![0.0; frames];
    for t in 0..frames {
        for n in t * frame_len..(t + 1) * frame_len {
            let c = clean[n].as_f64();
            let d = enhanced[n].as_f64() - c;
            clean_e[t] += c * c;
            err_e[t] += d * d;
        }
    }
    let max = clean_e.iter().cloned().fold(0.0, f64::max);
    let active: Vec<usize> = (0..frames).filter(|&t| max > 0.0 && clean_e[t] > max * 1e-4).collect();
    let active = if active.is_empty() { (0..frames).collect() } else { active };
    let sum: f64 = active
        .iter()
        .map(|&t| {
            let snr = if err_e[t] == 0.0 { SEGSNR_MAX_DB } else { 10.0 * (clean_e[t] / err_e[t]).log10() };
            snr.clamp(SEGSNR_MIN_DB, SEGSNR_MAX_DB)
        })
        .sum();
    Ok(sum / active.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn segsnr_identity_hits_cap() {
        let x = noise(1, 1024);
        assert_eq!(metric_segsnr(&x, &x, 128).unwrap(), SEGSNR_MAX_DB);
    }

    #[test]
    fn segsnr_equal_power_noise_is_near_zero() {
        let x = noise(1, 64000);
        let n = noise(2, 64000);
        let y: Vec<f64> = x.iter().zip(&n).map(|(a, b)| a + b).collect();
        assert!(metric_segsnr(&y, &x, 256).unwrap().abs() < 0.5);
    }

    #[test]
    fn drr_gain_of_dry_is_capped_and_observed_is_zero() {
        let s = noise(3, 4000);
        let mut o = vec![0.0; 4000];
        for n in 2..4000 {
            o[n] = s[n - 2] + 0.5 * s[n.saturating_sub(40)];
        }
        let dry = AudioBuffer::mono(s.clone(), 16000).unwrap();
        let obs = AudioBuffer::mono(o, 16000).unwrap();
        assert_eq!(metric_drr_gain(&dry, &obs, &dry, 100).unwrap(), DRR_GAIN_CAP_DB);
        assert_eq!(metric_drr_gain(&obs, &obs, &dry, 100).unwrap(), 0.0);
    }

    #[test]
    fn drr_gain_rejects_unrelated_signal() {
        let dry = AudioBuffer::mono(noise(4, 4000), 16000).unwrap();
        let other = AudioBuffer::mono(noise(5, 4000), 16000).unwrap();
        assert!(matches!(metric_drr_gain(&other, &other, &dry, 50), Err(Error::AlignmentFailed { .. })));
    }
}
