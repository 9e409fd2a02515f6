//! STFT front end against a direct DFT, plus its scaling, shift and shape
//! properties.

mod common;

use num_complex::{Complex32, Complex64};
use promptmoe::dsp::{
    frame_count, frame_signal, hann_window, iq_to_spectrogram, stft_magnitude, IqRecord, FFT_LEN, FRAME_LEN, HOP,
    SPEC_SIZE,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_frame(rng: &mut impl Rng) -> Vec<Complex32> {
    (0..FRAME_LEN)
        .map(|_| Complex32::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

fn hann_f64(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos())
        .collect()
}

#[test]
fn matches_direct_dft_on_random_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let w = hann_f64(FFT_LEN);
    let frames = frame_count(FRAME_LEN, FFT_LEN, HOP);
    assert_eq!(frames, 113);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = random_frame(&mut rng);
        let spec = iq_to_spectrogram(&IqRecord::new(x.clone(), 0).unwrap()).unwrap();
        assert_eq!(spec.values().len(), SPEC_SIZE * SPEC_SIZE);
        for m in 0..frames {
            let seg: Vec<Complex64> = (0..FFT_LEN)
                .map(|n| {
                    let s = x[m * HOP + n];
                    Complex64::new(s.re as f64, s.im as f64) * w[n]
                })
                .collect();
            for (k, mag) in common::naive_dft_mag(&seg).into_iter().enumerate() {
                worst = worst.max((spec.get(k, m) as f64 - mag).abs());
            }
        }
        for k in 0..SPEC_SIZE {
            for m in frames..SPEC_SIZE {
                assert_eq!(spec.get(k, m), 0.0, "padding column {m} must be zero");
            }
        }
    }
    println!("max abs deviation from direct DFT: {worst:.3e}");
    assert!(worst <= 1e-4, "max abs deviation {worst:e}");
}

#[test]
fn raw_grid_has_113_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frame = frame_signal(&IqRecord::new(random_frame(&mut rng), 0).unwrap()).unwrap();
    let grid = stft_magnitude(&frame);
    assert_eq!((grid.bins, grid.frames), (128, 113));
}

#[test]
fn impulse_moves_one_column_per_hop() {
    let peak_column = |pos: usize| {
        let mut x = vec![Complex32::new(0.0, 0.0); FRAME_LEN];
        x[pos] = Complex32::new(1.0, 0.0);
        let spec = iq_to_spectrogram(&IqRecord::new(x, 0).unwrap()).unwrap();
        (0..SPEC_SIZE)
            .max_by(|&a, &b| spec.get(0, a).total_cmp(&spec.get(0, b)))
            .unwrap()
    };
    // the window peaks at n = 64, so an impulse at 64 + 8j dominates frame j
    for j in [3, 20, 50, 90] {
        let pos = FFT_LEN / 2 + HOP * j;
        assert_eq!(peak_column(pos), j);
        assert_eq!(peak_column(pos + HOP), j + 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn magnitude_scales_with_positive_gain(seed in any::<u64>(), a in 0.01f32..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_frame(&mut rng);
        let scaled: Vec<Complex32> = x.iter().map(|v| v * a).collect();
        let s1 = iq_to_spectrogram(&IqRecord::new(x, 0).unwrap()).unwrap();
        let s2 = iq_to_spectrogram(&IqRecord::new(scaled, 0).unwrap()).unwrap();
        let peak = s1.values().iter().fold(0.0f32, |m, &v| m.max(v));
        for (u, v) in s1.values().iter().zip(s2.values()) {
            // a few ulps of the row's scale, from rounding inside the FFT
            prop_assert!((a * u - v).abs() <= 1e-5 * a * peak, "{} vs {}", a * u, v);
        }
    }

    #[test]
    fn any_length_gives_square_output(len in 1usize..3000, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Complex32> = (0..len)
            .map(|_| Complex32::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let s = iq_to_spectrogram(&IqRecord::new(x, 0).unwrap()).unwrap();
        prop_assert_eq!(s.values().len(), SPEC_SIZE * SPEC_SIZE);
        prop_assert!(s.values().iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}

#[test]
fn periodic_hann_sums_to_half_its_length() {
    let s: f64 = hann_window(FFT_LEN).unwrap().iter().map(|&w| w as f64).sum();
    assert!((s - 64.0).abs() < 1e-4, "{s}");
}

fn strongest_row(spec: &promptmoe::dsp::Spectrogram, col: usize) -> usize {
    (0..SPEC_SIZE)
        .max_by(|&a, &b| spec.get(a, col).total_cmp(&spec.get(b, col)))
        .unwrap()
}

#[test]
fn constant_and_tone_peak_in_their_bins() {
    let valid = frame_count(FRAME_LEN, FFT_LEN, HOP);
    for (bin, want) in [(0usize, 0usize), (16, 16)] {
        let samples: Vec<Complex32> = (0..FRAME_LEN)
            .map(|n| {
                let ph = 2.0 * std::f64::consts::PI * (bin * n) as f64 / FFT_LEN as f64;
                Complex32::new(ph.cos() as f32, ph.sin() as f32)
            })
            .collect();
        let spec = iq_to_spectrogram(&IqRecord::new(samples, 0).unwrap()).unwrap();
        for col in 0..valid {
            assert_eq!(strongest_row(&spec, col), want, "bin {bin}, column {col}");
        }
    }
}
