use edgeseg::metrics::{
    boundary_score, evaluate, f_measure, iou, j_mean, jaccard_grad, jaccard_loss, miou, Mask,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Boundary pixels by direct neighbour inspection.
fn boundary_oracle(m: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = (m.height(), m.width());
    let fg = |y: isize, x: isize| {
        y >= 0
            && x >= 0
            && y < h as isize
            && x < w as isize
            && m.values()[y as usize * w + x as usize] >= 0.5
    };
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if fg(y, x)
                && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|(dy, dx)| !fg(y + dy, x + dx))
            {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// Fraction of `a` within Chebyshev distance `tol` of some pixel of `b`, from the full distance matrix.
fn matched_fraction(a: &[(usize, usize)], b: &[(usize, usize)], tol: usize) -> f64 {
    let hit = a
        .iter()
        .filter(|p| {
            b.iter()
                .map(|q| p.0.abs_diff(q.0).max(p.1.abs_diff(q.1)))
                .min()
                .is_some_and(|d| d <= tol)
        })
        .count();
    hit as f64 / a.len() as f64
}

fn square(h: usize, w: usize, rows: (usize, usize), cols: (usize, usize)) -> Mask {
    Mask::from_fn(h, w, |y, x| {
        (rows.0..=rows.1).contains(&y) && (cols.0..=cols.1).contains(&x)
    })
}

#[test]
fn shifted_square_against_distance_matrix() {
    let gt = square(8, 8, (2, 5), (2, 5));
    let pred = square(8, 8, (2, 5), (3, 6));
    let (bp, bg) = (boundary_oracle(&pred), boundary_oracle(&gt));
    assert_eq!((bp.len(), bg.len()), (12, 12));
    let s = boundary_score(&pred, &gt, 0).unwrap();
    assert_eq!(s.precision, matched_fraction(&bp, &bg, 0));
    assert_eq!(s.recall, matched_fraction(&bg, &bp, 0));
    // 6 of the 12 ring pixels coincide (top and bottom edges, columns 3..=5)
    assert_eq!((s.precision, s.recall, s.f), (0.5, 0.5, 0.5));
    assert_eq!(f_measure(&pred, &gt, 1).unwrap(), 1.0);
}

#[test]
fn iou_hand_case_and_means() {
    let gt = Mask::new(2, 3, vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let pred = Mask::new(2, 3, vec![0.9, 0.6, 0.7, 0.5, 0.2, 0.0]).unwrap();
    assert_eq!(iou(&pred, &gt, 0.5).unwrap(), 0.6);
    let pairs = vec![(gt.clone(), gt.clone()), (pred.clone(), gt.clone())];
    assert!((j_mean(&pairs, 0.5).unwrap() - 0.8).abs() < 1e-12);
    assert_eq!(miou(&pairs, 0.5).unwrap(), j_mean(&pairs, 0.5).unwrap());
    let swapped = vec![pairs[1].clone(), pairs[0].clone()];
    assert_eq!(j_mean(&swapped, 0.5).unwrap(), j_mean(&pairs, 0.5).unwrap());
}

#[test]
fn empty_mask_conventions() {
    let z = Mask::zeros(4, 4);
    let one = square(4, 4, (1, 2), (1, 2));
    assert_eq!(iou(&z, &z, 0.5).unwrap(), 1.0);
    assert_eq!(f_measure(&z, &z, 0).unwrap(), 1.0);
    assert_eq!(iou(&z, &one, 0.5).unwrap(), 0.0);
    assert_eq!(f_measure(&z, &one, 3).unwrap(), 0.0);
    assert_eq!(f_measure(&one, &z, 3).unwrap(), 0.0);
    assert!(j_mean(&[], 0.5).is_err());
    assert!(evaluate(&[], 0.5, None).is_err());
    assert!(iou(&z, &Mask::zeros(4, 5), 0.5).is_err());
}

#[test]
fn far_boundaries_score_zero() {
    let a = square(16, 16, (0, 2), (0, 2));
    let b = square(16, 16, (10, 13), (10, 13));
    assert_eq!(f_measure(&a, &b, 3).unwrap(), 0.0);
    assert_eq!(iou(&a, &b, 0.5).unwrap(), 0.0);
}

#[test]
fn jaccard_loss_hand_values() {
    assert!((jaccard_loss(&[0.5], &[1.0]) - 0.5).abs() < 1e-5);
    let g = [1.0, 0.0, 1.0, 1.0];
    assert!(jaccard_loss(&g, &g) < 1e-6);
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let p = (0..64).map(|_| rng.gen_range(0.05..0.95)).collect();
    let g = (0..64)
        .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
        .collect();
    (p, g)
}

/// Largest per-component relative error of the analytic gradient against central differences.
fn max_fd_error(p: &[f64], g: &[f64], step: f64) -> f64 {
    let analytic = jaccard_grad(p, g);
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let (mut hi, mut lo) = (p.to_vec(), p.to_vec());
        hi[i] += step;
        lo[i] -= step;
        let fd = (jaccard_loss(&hi, g) - jaccard_loss(&lo, g)) / (2.0 * step);
        let scale = analytic[i].abs().max(fd.abs()).max(1e-12);
        worst = worst.max((analytic[i] - fd).abs() / scale);
    }
    worst
}

#[test]
fn jaccard_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (p, g) = random_instance(&mut rng);
        worst = worst.max(max_fd_error(&p, &g, 1e-3));
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn small_gradient_step_decreases_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (p, g) = random_instance(&mut rng);
        let grad = jaccard_grad(&p, &g);
        let l0 = jaccard_loss(&p, &g);
        let stepped: Vec<f64> = p
            .iter()
            .zip(&grad)
            .map(|(a, d)| (a - 0.1 * d).clamp(0.0, 1.0))
            .collect();
        assert!(jaccard_loss(&stepped, &g) < l0);
    }
}

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(0.0f32..=1.0, h * w).prop_map(move |v| Mask::new(h, w, v).unwrap())
}

fn pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| (mask_strategy(h, w), mask_strategy(h, w)))
}

proptest! {
    #[test]
    fn scores_are_bounded_and_perfect_on_identity((p, g) in pair(), tol in 0usize..4) {
        let i = iou(&p, &g, 0.5).unwrap();
        let s = boundary_score(&p, &g, tol).unwrap();
        for v in [i, s.precision, s.recall, s.f] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(iou(&g, &g, 0.5).unwrap(), 1.0);
        prop_assert_eq!(f_measure(&g, &g, tol).unwrap(), 1.0);
    }

    #[test]
    fn iou_and_f_are_symmetric((p, g) in pair(), tol in 0usize..4) {
        let (pb, gb) = (Mask::from_fn(p.height(), p.width(), |y, x| p.values()[y * p.width() + x] >= 0.5), g);
        prop_assert_eq!(iou(&pb, &gb, 0.5).unwrap(), iou(&gb, &pb, 0.5).unwrap());
        prop_assert_eq!(f_measure(&pb, &gb, tol).unwrap(), f_measure(&gb, &pb, tol).unwrap());
    }

    #[test]
    fn boundary_score_matches_distance_oracle((p, g) in pair(), tol in 0usize..4) {
        let (bp, bg) = (boundary_oracle(&p), boundary_oracle(&g));
        prop_assume!(!bp.is_empty() && !bg.is_empty());
        let s = boundary_score(&p, &g, tol).unwrap();
        prop_assert!((s.precision - matched_fraction(&bp, &bg, tol)).abs() < 1e-12);
        prop_assert!((s.recall - matched_fraction(&bg, &bp, tol)).abs() < 1e-12);
    }

    #[test]
    fn tolerance_of_a_diagonal_matches_everything((p, g) in pair()) {
        prop_assume!(p.binarize(0.5).contains(&true) && g.binarize(0.5).contains(&true));
        let diag = ((p.height().pow(2) + p.width().pow(2)) as f64).sqrt().ceil() as usize;
        prop_assert_eq!(f_measure(&p, &g, diag).unwrap(), 1.0);
    }

    #[test]
    fn report_means_are_sample_means(pairs in prop::collection::vec(pair(), 1..5)) {
        let pairs: Vec<_> = pairs.into_iter().filter(|(p, g)| p.height() == g.height()).collect();
        let r = evaluate(&pairs, 0.5, Some(1)).unwrap();
        let n = r.samples.len() as f64;
        prop_assert!((r.miou - r.samples.iter().map(|s| s.iou).sum::<f64>() / n).abs() < 1e-12);
        prop_assert!((r.f_mean - r.samples.iter().map(|s| s.f).sum::<f64>() / n).abs() < 1e-12);
        prop_assert_eq!(r.miou, r.j_mean);
    }

    #[test]
    fn gradient_matches_finite_differences_on_random_sizes(
        p in prop::collection::vec(0.05f64..0.95, 1..40),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = p.iter().map(|_| rng.gen_range(0..2) as f64).collect();
        prop_assert!(max_fd_error(&p, &g, 1e-3) < 1e-4);
    }
}

#[test]
fn default_tolerance_tracks_diagonal() {
    assert_eq!(Mask::zeros(512, 512).default_tolerance(), 6);
    assert_eq!(Mask::zeros(32, 32).default_tolerance(), 0);
    assert!(Mask::new(1, 1, vec![1.5]).is_err());
}
