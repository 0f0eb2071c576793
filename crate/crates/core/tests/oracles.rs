//! Independent re-derivations checked against the library.

use cha_core::acoustics::{
    element_signals, masked_scan, Medium, Point2, Pulse, TimeGrid, Transducer,
    VirtualArrayGeometry,
};
use cha_core::codes::{
    build_code, is_valid_s_order, quadratic_residue_sequence, CodeKind, CodeOrder, MaskPattern,
};
use cha_core::multiplex::{inverse, multiplex_measure, snr_gain, NoiseModel};
use nalgebra::DMatrix;

fn sieve(limit: usize) -> Vec<bool> {
    let mut prime = vec![true; limit + 1];
    prime[0] = false;
    if limit >= 1 {
        prime[1] = false;
    }
    let mut p = 2;
    while p * p <= limit {
        if prime[p] {
            let mut m = p * p;
            while m <= limit {
                prime[m] = false;
                m += p;
            }
        }
        p += 1;
    }
    prime
}

#[test]
fn valid_orders_match_sieve() {
    let prime = sieve(10_000);
    for n in 0..=10_000 {
        assert_eq!(is_valid_s_order(n), prime[n] && n % 4 == 3, "n = {n}");
    }
}

#[test]
fn residue_sequences_match_squares() {
    for n in (3..600).filter(|&n| is_valid_s_order(n)) {
        let mut want = vec![0u8; n];
        want[0] = 1;
        for k in 1..n {
            want[(k * k) % n] = 1;
        }
        let got = quadratic_residue_sequence(CodeOrder::s_matrix(n).unwrap()).unwrap();
        assert_eq!(got, want, "n = {n}");
    }
}

#[test]
fn analytic_inverse_matches_lu() {
    for n in [7, 31, 59] {
        let w = build_code(CodeKind::SMatrix, n).unwrap();
        let lu = w.to_f64().lu().try_inverse().unwrap();
        let analytic = inverse(&w).unwrap();
        assert!((&lu - &analytic).amax() <= 1e-9, "n = {n}");
    }
}

#[test]
fn gain_matches_generic_formula() {
    for (kind, n) in [
        (CodeKind::SMatrix, 7),
        (CodeKind::SMatrix, 31),
        (CodeKind::SMatrix, 59),
        (CodeKind::Hadamard, 16),
    ] {
        let w = build_code(kind, n).unwrap().to_f64();
        let gram_inv = (w.transpose() * &w).lu().try_inverse().unwrap();
        let want = (n as f64 / gram_inv.trace()).sqrt();
        let got = snr_gain(&build_code(kind, n).unwrap()).unwrap();
        assert!((got - want).abs() < 1e-10, "{kind:?} {n}");
    }
}

#[test]
fn acoustic_scan_equals_matrix_measurement() {
    let medium = Medium::water();
    let pulse = Pulse::new(1e6, 0.6, 1.0).unwrap();
    for (n, pitch, diameter) in [(7, 1.0, 1.0), (31, 2.0, 1.5), (59, 1.0, 1.0)] {
        let mask = MaskPattern::s_matrix(n, pitch, diameter).unwrap();
        let receiver = Transducer::receiver(Point2::new(0.0, 0.0), 38.0).unwrap();
        let geometry = VirtualArrayGeometry::new(mask.clone(), receiver, 1.5).unwrap();
        for tx_pos in [Point2::new(0.0, 150.0), Point2::new(-7.3, 60.0)] {
            let tx = Transducer::transmitter(tx_pos, 12.7).unwrap();
            let grid = TimeGrid::covering(20e-6, 120e-6, &pulse, 1e-8).unwrap();
            let x = element_signals(&tx, &geometry, &pulse, &medium, &grid).unwrap();
            let y = masked_scan(&tx, &geometry, &pulse, &medium, &grid).unwrap();
            let w = mask.code_matrix().unwrap();
            let want = multiplex_measure(&x, &w, &NoiseModel::noiseless()).unwrap();
            let scale = want.values().amax();
            assert!(scale > 0.0);
            assert!((y.values() - want.values()).amax() <= 1e-10 * scale, "n = {n}");
        }
    }
}

#[test]
fn hadamard_columns_are_orthogonal() {
    for k in [2usize, 4, 8, 16, 32, 64] {
        let h = build_code(CodeKind::Hadamard, k).unwrap().to_f64();
        let g: DMatrix<f64> = h.transpose() * &h;
        assert_eq!(g, DMatrix::identity(k, k) * k as f64);
    }
}
