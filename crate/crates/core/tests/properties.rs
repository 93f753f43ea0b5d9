use proptest::prelude::*;
use std::path::Path;

use varloss::analysis::{
    pca_theorem_check, permutation_average_check, shrinkage_bound_check, smooth_signal, variance_loss,
};
use varloss::datasets::{decode_dump, decode_idx, encode_dump, encode_idx, DumpDtype};
use varloss::linalg::{covariance, sqrtm_psd, sym_eig, VarianceKind};
use varloss::metric::{fit_gaussian, frechet_distance};
use varloss::twostage::{renormalize_latents, renormalize_pixels, PixelStats};
use varloss::vae::{entropy_decomposition, kl_closed_form, GaussianParams};
use varloss::Tensor;

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = Tensor> {
    (rows, cols).prop_flat_map(|(n, m)| {
        prop::collection::vec(-5.0f64..5.0, n * m).prop_map(move |d| Tensor::new(vec![n, m], d).unwrap())
    })
}

fn same_width_pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..5).prop_flat_map(|m| (matrix(3..30, m..m + 1), matrix(3..30, m..m + 1)))
}

fn params() -> impl Strategy<Value = GaussianParams> {
    (1usize..8, 1usize..6).prop_flat_map(|(n, k)| {
        (
            prop::collection::vec(-4.0f64..4.0, n * k),
            prop::collection::vec(-8.0f64..6.0, n * k),
        )
            .prop_map(move |(mu, lv)| {
                GaussianParams::new(Tensor::new(vec![n, k], mu).unwrap(), Tensor::new(vec![n, k], lv).unwrap()).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_non_negative_and_matches_entropy_gap(p in params()) {
        let kl = kl_closed_form(&p);
        prop_assert!(kl.iter().all(|&v| v >= 0.0));
        prop_assert!(entropy_decomposition(&p).kl_consistency_residual <= 1e-10);
    }

    #[test]
    fn covariance_is_symmetric_psd(x in matrix(2..30, 1..8)) {
        let c = covariance(&x, VarianceKind::Population).unwrap();
        prop_assert_eq!(c.clone(), c.transpose().unwrap());
        let scale = c.data().iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let e = sym_eig(&c).unwrap();
        prop_assert!(e.eigenvalues.iter().all(|&l| l >= -1e-10 * scale));
    }

    #[test]
    fn eigen_reconstructs_and_sqrtm_squares(x in matrix(2..25, 1..9)) {
        let c = covariance(&x, VarianceKind::Population).unwrap();
        let scale = c.data().iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let e = sym_eig(&c).unwrap();
        let back = e.reconstruct();
        for (a, b) in back.data().iter().zip(c.data()) {
            prop_assert!((a - b).abs() <= 1e-9 * scale);
        }
        let r = sqrtm_psd(&c).unwrap();
        let sq = r.matmul(&r).unwrap();
        for (a, b) in sq.data().iter().zip(c.data()) {
            prop_assert!((a - b).abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn dump_round_trip_is_bit_exact(shape in prop::collection::vec(0usize..5, 0..4), seed in any::<u64>()) {
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len as u64)
            .map(|i| f64::from_bits(seed.wrapping_mul(6364136223846793005).wrapping_add(i) >> 2))
            .map(|v| if v.is_finite() { v } else { 0.5 })
            .collect();
        let t = Tensor::new(shape, data).unwrap();
        let back = decode_dump(&encode_dump(&t, DumpDtype::F64).unwrap(), Path::new("p")).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn dump_header_mutations_are_rejected(at in 0usize..8, delta in 1u8..=255) {
        let t = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap();
        let mut bytes = encode_dump(&t, DumpDtype::F64).unwrap();
        bytes[at] = bytes[at].wrapping_add(delta);
        prop_assert!(decode_dump(&bytes, Path::new("p")).is_err());
    }

    #[test]
    fn idx_values_lie_in_unit_interval(pixels in prop::collection::vec(any::<u8>(), 1..64)) {
        let bytes = encode_idx(&[pixels.len()], &pixels).unwrap();
        let t = decode_idx(&bytes, Path::new("p")).unwrap();
        prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pca_theorem_holds(x in matrix(3..40, 2..7), kfrac in 0.0f64..1.0) {
        let m = x.cols();
        let k = 1 + ((m - 1) as f64 * kfrac) as usize;
        let k = k.min(m);
        let t = pca_theorem_check(&x, k).unwrap();
        prop_assert!(t.max_discrepancy() <= 1e-8);
    }

    #[test]
    fn permutation_average_identity(x in matrix(2..40, 1..5), seed in any::<u64>()) {
        let mut rng = varloss::Rng::new(seed);
        let perm = rng.permutation(x.rows());
        let r = permutation_average_check(&x, &perm).unwrap();
        prop_assert!((r.mse - r.variance_loss).abs() <= 1e-10);
    }

    #[test]
    fn shrinkage_never_beats_variance_loss(x in matrix(2..30, 1..6), seed in any::<u64>()) {
        let mut rng = varloss::Rng::new(seed);
        let t = Tensor::new(x.shape().to_vec(), (0..x.len()).map(|_| rng.uniform()).collect()).unwrap();
        let r = shrinkage_bound_check(&x, &t).unwrap();
        prop_assert!(r.holds);
        prop_assert!(r.mse <= r.variance_loss + 1e-12);
    }

    #[test]
    fn variance_loss_of_identity_is_zero(x in matrix(1..20, 1..6)) {
        let r = variance_loss(&x, &x).unwrap();
        prop_assert_eq!(r.mse, 0.0);
        prop_assert!(r.loss_per_feature.abs() <= 1e-12);
        prop_assert!(r.loss_paper_axis.abs() <= 1e-12);
    }

    #[test]
    fn smoothing_preserves_the_mean(y in prop::collection::vec(-10.0f64..10.0, 5..80), half in 0usize..4) {
        let w = (2 * half + 1).min(if y.len() % 2 == 1 { y.len() } else { y.len() - 1 });
        let s = smooth_signal(&y, w).unwrap();
        let gap = (y.iter().sum::<f64>() - s.iter().sum::<f64>()).abs() / y.len() as f64;
        prop_assert!(gap <= 1e-12);
    }

    #[test]
    fn latent_renormalization_is_standardizing_and_idempotent(z in matrix(2..50, 1..6)) {
        let (zr, _) = renormalize_latents(&z).unwrap();
        let (zz, _) = renormalize_latents(&zr).unwrap();
        for (a, b) in zz.data().iter().zip(zr.data()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        let mean = zr.column_means();
        prop_assert!(mean.iter().all(|m| m.abs() <= 1e-10));
    }

    #[test]
    fn pixel_renormalization_hits_target_std(x in matrix(2..20, 2..10), target in 0.05f64..2.0) {
        prop_assume!(PixelStats::of(&x).unwrap().std >= 1e-3);
        let (out, f) = renormalize_pixels(&x, PixelStats { mean: 0.3, std: target }, false).unwrap();
        prop_assert!(f.scale > 0.0);
        prop_assert!((PixelStats::of(&out).unwrap().std - target).abs() <= 1e-8);
        for i in 1..x.len() {
            prop_assert_eq!(x.data()[i - 1] < x.data()[i], out.data()[i - 1] < out.data()[i]);
        }
    }

    #[test]
    fn frechet_is_symmetric_and_zero_on_itself((a, b) in same_width_pair()) {
        let (sa, sb) = (fit_gaussian(&a).unwrap(), fit_gaussian(&b).unwrap());
        let dab = frechet_distance(&sa, &sb).unwrap();
        let dba = frechet_distance(&sb, &sa).unwrap();
        // tr sqrt(.) is only square-root continuous at singular matrices, so
        // rank-deficient covariances lose about half the digits.
        let full_rank = a.rows() > a.cols() && b.rows() > b.cols();
        let tol = if full_rank { 1e-8 } else { 1e3 * f64::EPSILON.sqrt() };
        prop_assert!(dab >= 0.0);
        prop_assert!((dab - dba).abs() <= tol * (1.0 + dab.abs()), "{dab} vs {dba}");
        prop_assert!(frechet_distance(&sa, &sa).unwrap() <= tol * (1.0 + sa.cov.trace().unwrap()));
    }
}
