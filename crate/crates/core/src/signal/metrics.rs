//! SI-SDR, power measurement and SNR-controlled mixing.

use super::{SignalError, Waveform};

/// Output range of [`si_sdr`] in dB.
pub const SI_SDR_CAP_DB: f64 = 120.0;
/// Residual-energy floor inside [`si_sdr`].
pub const SI_SDR_EPS: f64 = 1e-12;
/// Most noise sources mixed into one scene.
pub const MAX_NOISE_SOURCES: usize = 5;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant signal-to-distortion ratio of estimate `e` against
/// reference `c`, in dB, clamped to ±[`SI_SDR_CAP_DB`].
///
/// A residual at or below `SI_SDR_EPS·‖c‖²` already means a ratio above the
/// cap, so it returns the cap directly; otherwise the residual is floored at
/// `SI_SDR_EPS`. A zero estimate returns the lower cap.
pub fn si_sdr(e: &Waveform, c: &Waveform) -> Result<f64, SignalError> {
    si_sdr_slices(e.samples(), c.samples())
}

pub fn si_sdr_slices(e: &[f64], c: &[f64]) -> Result<f64, SignalError> {
    if e.len() != c.len() {
        return Err(SignalError::LengthMismatch { left: e.len(), right: c.len() });
    }
    let cc = dot(c, c);
    if cc == 0.0 {
        return Err(SignalError::ZeroNorm("reference"));
    }
    let alpha = dot(e, c) / cc;
    let target = alpha * alpha * cc;
    let residual: f64 = e.iter().zip(c).map(|(ei, ci)| (alpha * ci - ei).powi(2)).sum();
    if target == 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    if residual <= SI_SDR_EPS * cc {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / residual.max(SI_SDR_EPS)).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// Mean squared amplitude.
pub fn power(x: &[f64]) -> f64 {
    dot(x, x) / x.len().max(1) as f64
}

/// `10·log10(P_clean / P_noise)`.
pub fn snr_db(clean: &[f64], noise: &[f64]) -> f64 {
    10.0 * (power(clean) / power(noise)).log10()
}

/// Trim or loop `x` to exactly `len` samples.
fn fit_length(x: &[f64], len: usize) -> Vec<f64> {
    x.iter().copied().cycle().take(len).collect()
}

/// Sum `noises` (each fitted to the clean length) and add them to `clean`
/// scaled so the clean-to-noise power ratio is exactly `snr_db`.
pub fn mix_at_snr(clean: &Waveform, noises: &[Waveform], snr_db: f64) -> Result<Waveform, SignalError> {
    if noises.is_empty() || noises.len() > MAX_NOISE_SOURCES {
        return Err(SignalError::NoiseCount(noises.len()));
    }
    let len = clean.len();
    let mut total = vec![0.0; len];
    for n in noises {
        for (t, v) in total.iter_mut().zip(fit_length(n.samples(), len)) {
            *t += v;
        }
    }
    let pc = power(clean.samples());
    let pn = power(&total);
    if pc == 0.0 {
        return Err(SignalError::Silent("clean"));
    }
    if pn == 0.0 {
        return Err(SignalError::Silent("noise"));
    }
    let gain = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let mixed = clean.samples().iter().zip(&total).map(|(c, n)| c + gain * n).collect();
    Waveform::new(mixed, clean.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn w(x: &[f64]) -> Waveform {
        Waveform::new(x.to_vec(), 16_000).unwrap()
    }

    #[test]
    fn half_projection_is_zero_db() {
        let v = si_sdr(&w(&[1.0, 0.0]), &w(&[1.0, 1.0])).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn perfect_estimate_hits_cap() {
        let c = w(&[0.3, -0.2, 0.9]);
        assert_eq!(si_sdr(&c, &c).unwrap(), SI_SDR_CAP_DB);
    }

    #[test]
    fn silent_estimate_hits_floor_and_silent_reference_errors() {
        assert_eq!(si_sdr(&w(&[0.0, 0.0]), &w(&[1.0, 2.0])).unwrap(), -SI_SDR_CAP_DB);
        assert!(matches!(si_sdr(&w(&[1.0, 0.0]), &w(&[0.0, 0.0])), Err(SignalError::ZeroNorm(_))));
        assert!(si_sdr(&w(&[1.0]), &w(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c: Vec<f64> = (0..500).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e: Vec<f64> = c.iter().map(|x| x + rng.gen_range(-0.3..0.3)).collect();
        let base = si_sdr_slices(&e, &c).unwrap();
        for beta in [0.1, 2.0, 3.0, 100.0] {
            let scaled: Vec<f64> = e.iter().map(|x| beta * x).collect();
            assert!((si_sdr_slices(&scaled, &c).unwrap() - base).abs() < 1e-6);
        }
    }

    #[test]
    fn mixing_hits_requested_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let clean = w(&(0..2000).map(|i| (i as f64 * 0.05).sin()).collect::<Vec<_>>());
        let noises: Vec<Waveform> =
            (0..3).map(|_| w(&(0..1500).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())).collect();
        for snr in [10.0, 5.0, 0.0, -5.0, -10.0, -15.0] {
            let noisy = mix_at_snr(&clean, &noises, snr).unwrap();
            let residual: Vec<f64> = noisy.samples().iter().zip(clean.samples()).map(|(a, b)| a - b).collect();
            assert!((snr_db(clean.samples(), &residual) - snr).abs() < 1e-6);
        }
        let noisy = mix_at_snr(&clean, &noises, 0.0).unwrap();
        let residual: Vec<f64> = noisy.samples().iter().zip(clean.samples()).map(|(a, b)| a - b).collect();
        assert!((power(&residual) / power(clean.samples()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn noise_arity_and_silence_guarded() {
        let clean = w(&[0.5; 100]);
        let n = w(&[0.1; 100]);
        assert!(matches!(mix_at_snr(&clean, &vec![n.clone(); 6], 0.0), Err(SignalError::NoiseCount(6))));
        assert!(matches!(mix_at_snr(&clean, &[], 0.0), Err(SignalError::NoiseCount(0))));
        assert!(matches!(mix_at_snr(&w(&[0.0; 100]), &[n], 0.0), Err(SignalError::Silent("clean"))));
        assert!(matches!(mix_at_snr(&clean, &[w(&[0.0; 10])], 0.0), Err(SignalError::Silent("noise"))));
    }
}
