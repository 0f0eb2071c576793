//! Weighing-matrix construction: cyclic S-matrices from quadratic residues,
//! Sylvester Hadamard matrices, the physical 2n-1 cell mask, and the closed-form
//! S-matrix inverse.
//!
//! Row convention: row `i` of a cyclic S-matrix is the base sequence shifted
//! left by `i`, i.e. `S[i][j] = base[(i + j) % n]`. The mask window at shift
//! `s` covers cells `s .. s + n`, so stepping the mask by one pitch walks
//! through the rows in order.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodeError {
    #[error("invalid S-matrix order: {n} {reason}")]
    InvalidOrder { n: usize, reason: OrderDefect },
    #[error("Hadamard order {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("base sequence of length {len} has weight {weight}, expected {expected}")]
    WrongWeight {
        len: usize,
        weight: usize,
        expected: usize,
    },
    #[error("base sequence entries must be 0 or 1 (found {0} at index {1})")]
    NonBinary(u8, usize),
    #[error("matrix entries must lie in {{-1, 0, 1}} (found {0})")]
    BadEntry(i8),
    #[error("expected {expected} entries for a {n}x{n} matrix, got {got}")]
    Shape { n: usize, expected: usize, got: usize },
    #[error("operation requires an S-matrix, got {0:?}")]
    NotSMatrix(CodeKind),
    #[error("mask geometry: {0}")]
    Geometry(String),
}

/// Why an integer is not a usable S-matrix order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderDefect {
    Zero,
    NotPrime,
    ResidueClass(usize),
}

impl std::fmt::Display for OrderDefect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OrderDefect::Zero => write!(f, "is not positive"),
            OrderDefect::NotPrime => write!(f, "is not prime"),
            OrderDefect::ResidueClass(r) => write!(f, "≡ {r} (mod 4), need ≡ 3 (mod 4)"),
        }
    }
}

/// Matrix order (number of virtual array elements).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodeOrder(usize);

impl CodeOrder {
    pub fn new(n: usize) -> Result<Self, CodeError> {
        if n == 0 {
            return Err(CodeError::InvalidOrder {
                n,
                reason: OrderDefect::Zero,
            });
        }
        Ok(CodeOrder(n))
    }

    /// Accepts only primes congruent to 3 mod 4.
    pub fn s_matrix(n: usize) -> Result<Self, CodeError> {
        match s_order_defect(n) {
            None => Ok(CodeOrder(n)),
            Some(reason) => Err(CodeError::InvalidOrder { n, reason }),
        }
    }

    pub fn get(self) -> usize {
        self.0
    }
}

fn is_prime(n: usize) -> bool {
    if n < 2 {
        return false;
    }
    if n < 4 {
        return true;
    }
    if n % 2 == 0 {
        return false;
    }
    let mut d = 3;
    while d * d <= n {
        if n % d == 0 {
            return false;
        }
        d += 2;
    }
    true
}

fn s_order_defect(n: usize) -> Option<OrderDefect> {
    if n == 0 {
        Some(OrderDefect::Zero)
    } else if !is_prime(n) {
        Some(OrderDefect::NotPrime)
    } else if n % 4 != 3 {
        Some(OrderDefect::ResidueClass(n % 4))
    } else {
        None
    }
}

/// True iff `n` is a prime of the form 4m + 3.
pub fn is_valid_s_order(n: usize) -> bool {
    s_order_defect(n).is_none()
}

/// Quadratic-residue base row: `s[0] = 1` and `s[j] = 1` iff `j` is a nonzero
/// square mod `n`. Weight is `(n + 1) / 2`.
pub fn quadratic_residue_sequence(order: CodeOrder) -> Result<Vec<u8>, CodeError> {
    let n = order.get();
    if let Some(reason) = s_order_defect(n) {
        return Err(CodeError::InvalidOrder { n, reason });
    }
    let mut seq = vec![0u8; n];
    seq[0] = 1;
    for k in 1..n {
        seq[(k * k) % n] = 1;
    }
    Ok(seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    SMatrix,
    Hadamard,
    Identity,
    Custom,
}

/// Square weighing matrix with small signed integer entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    order: CodeOrder,
    kind: CodeKind,
    entries: Vec<i8>,
}

impl CodeMatrix {
    /// Circulant S-matrix from a base row of weight `(n + 1) / 2`.
    pub fn cyclic_s_matrix(base: &[u8]) -> Result<Self, CodeError> {
        let n = base.len();
        let order = CodeOrder::new(n)?;
        if let Some((i, &v)) = base.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(CodeError::NonBinary(v, i));
        }
        let weight = base.iter().filter(|&&v| v == 1).count();
        let expected = (n + 1) / 2;
        if weight != expected || n % 2 == 0 {
            return Err(CodeError::WrongWeight {
                len: n,
                weight,
                expected,
            });
        }
        if n == 1 {
            return Ok(Self::identity(order));
        }
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            entries.extend((0..n).map(|j| base[(i + j) % n] as i8));
        }
        Ok(CodeMatrix {
            order,
            kind: CodeKind::SMatrix,
            entries,
        })
    }

    /// Sylvester construction; `k` must be a power of two.
    pub fn sylvester_hadamard(k: usize) -> Result<Self, CodeError> {
        if k == 0 || !k.is_power_of_two() {
            return Err(CodeError::NotPowerOfTwo(k));
        }
        let mut h = vec![1i8];
        let mut size = 1;
        while size < k {
            let next = size * 2;
            let mut doubled = vec![0i8; next * next];
            for i in 0..size {
                for j in 0..size {
                    let v = h[i * size + j];
                    doubled[i * next + j] = v;
                    doubled[i * next + j + size] = v;
                    doubled[(i + size) * next + j] = v;
                    doubled[(i + size) * next + j + size] = -v;
                }
            }
            h = doubled;
            size = next;
        }
        Ok(CodeMatrix {
            order: CodeOrder(k),
            kind: CodeKind::Hadamard,
            entries: h,
        })
    }

    pub fn identity(order: CodeOrder) -> Self {
        let n = order.get();
        let mut entries = vec![0i8; n * n];
        for i in 0..n {
            entries[i * n + i] = 1;
        }
        CodeMatrix {
            order,
            kind: CodeKind::Identity,
            entries,
        }
    }

    /// Row-major entries; the kind is inferred from structure (see [`classify`]).
    ///
    /// [`classify`]: CodeMatrix::classify
    pub fn from_entries(n: usize, entries: Vec<i8>) -> Result<Self, CodeError> {
        let order = CodeOrder::new(n)?;
        if entries.len() != n * n {
            return Err(CodeError::Shape {
                n,
                expected: n * n,
                got: entries.len(),
            });
        }
        if let Some(&bad) = entries.iter().find(|v| !(-1..=1).contains(*v)) {
            return Err(CodeError::BadEntry(bad));
        }
        let mut m = CodeMatrix {
            order,
            kind: CodeKind::Custom,
            entries,
        };
        m.kind = m.classify();
        Ok(m)
    }

    /// Structural kind: identity, ±1 Hadamard (HᵀH = nI), or a left-shift
    /// circulant 0/1 matrix satisfying the S-matrix Gram identity.
    pub fn classify(&self) -> CodeKind {
        let n = self.n();
        if (0..n).all(|i| (0..n).all(|j| self.get(i, j) == (i == j) as i8)) {
            return CodeKind::Identity;
        }
        if self.entries.iter().all(|&v| v == 1 || v == -1) && self.is_hadamard() {
            return CodeKind::Hadamard;
        }
        let circulant =
            (0..n).all(|i| (0..n).all(|j| self.get(i, j) == self.get(0, (i + j) % n)));
        if circulant
            && n % 4 == 3
            && self.entries.iter().all(|&v| v == 0 || v == 1)
            && self.satisfies_s_identity()
        {
            return CodeKind::SMatrix;
        }
        CodeKind::Custom
    }

    pub fn n(&self) -> usize {
        self.order.get()
    }

    pub fn order(&self) -> CodeOrder {
        self.order
    }

    pub fn kind(&self) -> CodeKind {
        self.kind
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.entries[i * self.n() + j]
    }

    pub fn row(&self, i: usize) -> &[i8] {
        let n = self.n();
        &self.entries[i * n..(i + 1) * n]
    }

    pub fn entries(&self) -> &[i8] {
        &self.entries
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| self.get(i, j) as f64)
    }

    /// `W·Wᵀ` in exact integer arithmetic.
    pub fn row_gram(&self) -> Vec<i64> {
        let n = self.n();
        let mut g = vec![0i64; n * n];
        for i in 0..n {
            for j in 0..n {
                g[i * n + j] = self
                    .row(i)
                    .iter()
                    .zip(self.row(j))
                    .map(|(&a, &b)| a as i64 * b as i64)
                    .sum();
            }
        }
        g
    }

    /// `Wᵀ·W` in exact integer arithmetic.
    pub fn column_gram(&self) -> Vec<i64> {
        let n = self.n();
        let mut g = vec![0i64; n * n];
        for i in 0..n {
            for j in 0..n {
                g[i * n + j] = (0..n)
                    .map(|k| self.get(k, i) as i64 * self.get(k, j) as i64)
                    .sum();
            }
        }
        g
    }

    fn is_hadamard(&self) -> bool {
        let n = self.n() as i64;
        let size = self.n();
        self.column_gram()
            .iter()
            .enumerate()
            .all(|(idx, &v)| v == if idx / size == idx % size { n } else { 0 })
    }

    /// `S·Sᵀ = ((n+1)/4)(I + J)`.
    pub fn satisfies_s_identity(&self) -> bool {
        let size = self.n();
        if size % 4 != 3 {
            return false;
        }
        let q = ((size + 1) / 4) as i64;
        self.row_gram()
            .iter()
            .enumerate()
            .all(|(idx, &v)| v == if idx / size == idx % size { 2 * q } else { q })
    }
}

/// Closed-form S-matrix inverse `(2/(n+1))·(2Sᵀ − J)`.
pub fn s_matrix_inverse(s: &CodeMatrix) -> Result<DMatrix<f64>, CodeError> {
    if s.kind() != CodeKind::SMatrix {
        return Err(CodeError::NotSMatrix(s.kind()));
    }
    let n = s.n();
    let scale = 2.0 / (n as f64 + 1.0);
    Ok(DMatrix::from_fn(n, n, |i, j| {
        scale * (2.0 * s.get(j, i) as f64 - 1.0)
    }))
}

/// Builds the canonical matrix of `kind` at order `n`. An S-matrix of order 1
/// degenerates to the identity.
pub fn build_code(kind: CodeKind, n: usize) -> Result<CodeMatrix, CodeError> {
    match kind {
        CodeKind::SMatrix if n == 1 => Ok(CodeMatrix::identity(CodeOrder::new(1)?)),
        CodeKind::SMatrix => {
            let base = quadratic_residue_sequence(CodeOrder::s_matrix(n)?)?;
            CodeMatrix::cyclic_s_matrix(&base)
        }
        CodeKind::Hadamard => CodeMatrix::sylvester_hadamard(n),
        CodeKind::Identity => Ok(CodeMatrix::identity(CodeOrder::new(n)?)),
        CodeKind::Custom => Err(CodeError::Geometry(
            "custom matrices have no canonical construction".into(),
        )),
    }
}

/// Physical aperture strip: `2n - 1` cells repeating the base row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPattern {
    base: Vec<u8>,
    cells: Vec<u8>,
    pitch_mm: f64,
    aperture_diameter_mm: f64,
}

impl MaskPattern {
    pub fn from_code(
        base: &[u8],
        pitch_mm: f64,
        aperture_diameter_mm: f64,
    ) -> Result<Self, CodeError> {
        if base.is_empty() {
            return Err(CodeError::Geometry("empty base sequence".into()));
        }
        if let Some((i, &v)) = base.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(CodeError::NonBinary(v, i));
        }
        if !(pitch_mm.is_finite() && pitch_mm > 0.0) {
            return Err(CodeError::Geometry(format!(
                "pitch must be positive, got {pitch_mm} mm"
            )));
        }
        if !(aperture_diameter_mm.is_finite() && aperture_diameter_mm > 0.0) {
            return Err(CodeError::Geometry(format!(
                "aperture diameter must be positive, got {aperture_diameter_mm} mm"
            )));
        }
        if aperture_diameter_mm > pitch_mm {
            return Err(CodeError::Geometry(format!(
                "aperture diameter {aperture_diameter_mm} mm exceeds pitch {pitch_mm} mm"
            )));
        }
        let n = base.len();
        let cells = (0..2 * n - 1).map(|k| base[k % n]).collect();
        Ok(MaskPattern {
            base: base.to_vec(),
            cells,
            pitch_mm,
            aperture_diameter_mm,
        })
    }

    /// Quadratic-residue mask of order `n`.
    pub fn s_matrix(n: usize, pitch_mm: f64, aperture_diameter_mm: f64) -> Result<Self, CodeError> {
        let base = quadratic_residue_sequence(CodeOrder::s_matrix(n)?)?;
        Self::from_code(&base, pitch_mm, aperture_diameter_mm)
    }

    pub fn order(&self) -> usize {
        self.base.len()
    }

    pub fn base(&self) -> &[u8] {
        &self.base
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn pitch_mm(&self) -> f64 {
        self.pitch_mm
    }

    pub fn aperture_diameter_mm(&self) -> f64 {
        self.aperture_diameter_mm
    }

    /// Cells in front of the `n` element positions at mask shift `shift`.
    pub fn window(&self, shift: usize) -> &[u8] {
        let n = self.order();
        assert!(shift < n, "shift {shift} out of range for order {n}");
        &self.cells[shift..shift + n]
    }

    /// Length of the virtual array, `n · pitch`.
    pub fn span_mm(&self) -> f64 {
        self.order() as f64 * self.pitch_mm
    }

    /// The circulant matrix whose rows are the mask windows.
    pub fn code_matrix(&self) -> Result<CodeMatrix, CodeError> {
        CodeMatrix::cyclic_s_matrix(&self.base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const S_ORDERS: [usize; 8] = [3, 7, 11, 19, 23, 31, 43, 59];

    #[test]
    fn valid_orders() {
        assert!(is_valid_s_order(7));
        assert!(is_valid_s_order(31));
        assert!(is_valid_s_order(59));
        assert!(!is_valid_s_order(13));
        assert!(!is_valid_s_order(9));
        assert!(!is_valid_s_order(1));
        assert!(!is_valid_s_order(0));
    }

    #[test]
    fn order_defects_are_named() {
        let err = CodeOrder::s_matrix(13).unwrap_err();
        assert_eq!(err.to_string(), "invalid S-matrix order: 13 ≡ 1 (mod 4), need ≡ 3 (mod 4)");
        let err = CodeOrder::s_matrix(9).unwrap_err();
        assert!(err.to_string().contains("not prime"));
    }

    fn residues_by_enumeration(n: usize) -> Vec<usize> {
        let mut r: Vec<usize> = (1..n).map(|k| k * k % n).collect();
        r.sort_unstable();
        r.dedup();
        r
    }

    #[test]
    fn qr_sequence_small() {
        assert_eq!(residues_by_enumeration(3), vec![1]);
        assert_eq!(residues_by_enumeration(7), vec![1, 2, 4]);
        let s3 = quadratic_residue_sequence(CodeOrder::new(3).unwrap()).unwrap();
        assert_eq!(s3, vec![1, 1, 0]);
        let s7 = quadratic_residue_sequence(CodeOrder::new(7).unwrap()).unwrap();
        assert_eq!(s7, vec![1, 1, 1, 0, 1, 0, 0]);
    }

    #[test]
    fn qr_weights() {
        for n in [11, 19, 23, 31, 43, 59] {
            let s = quadratic_residue_sequence(CodeOrder::new(n).unwrap()).unwrap();
            let weight = s.iter().filter(|&&v| v == 1).count();
            assert_eq!(weight, 1 + residues_by_enumeration(n).len());
            assert_eq!(weight, (n + 1) / 2);
        }
    }

    #[test]
    fn qr_rejects_invalid_order() {
        assert!(matches!(
            quadratic_residue_sequence(CodeOrder::new(13).unwrap()),
            Err(CodeError::InvalidOrder {
                reason: OrderDefect::ResidueClass(1),
                ..
            })
        ));
    }

    #[test]
    fn cyclic_three() {
        let s = CodeMatrix::cyclic_s_matrix(&[1, 1, 0]).unwrap();
        assert_eq!(s.kind(), CodeKind::SMatrix);
        assert_eq!(s.row(0), &[1, 1, 0]);
        assert_eq!(s.row(1), &[1, 0, 1]);
        assert_eq!(s.row(2), &[0, 1, 1]);
    }

    #[test]
    fn cyclic_rejects_wrong_weight() {
        assert!(matches!(
            CodeMatrix::cyclic_s_matrix(&[1, 0, 0]),
            Err(CodeError::WrongWeight { weight: 1, expected: 2, .. })
        ));
    }

    #[test]
    fn s_gram_identity_and_weights() {
        for n in S_ORDERS {
            let s = build_code(CodeKind::SMatrix, n).unwrap();
            assert!(s.satisfies_s_identity(), "n = {n}");
        }
    }

    #[test]
    fn s_gram_identity_up_to_103() {
        for n in (3..=103).filter(|&n| is_valid_s_order(n)) {
            let s = build_code(CodeKind::SMatrix, n).unwrap();
            let g = s.row_gram();
            let q = ((n + 1) / 4) as i64;
            for i in 0..n {
                for j in 0..n {
                    let want = q * (i == j) as i64 + q;
                    assert_eq!(g[i * n + j], want, "n={n} ({i},{j})");
                }
            }
            // S·J = J·S = ((n+1)/2)·J
            let half = ((n + 1) / 2) as i64;
            for i in 0..n {
                assert_eq!(s.row(i).iter().map(|&v| v as i64).sum::<i64>(), half);
                assert_eq!((0..n).map(|k| s.get(k, i) as i64).sum::<i64>(), half);
            }
        }
    }

    #[test]
    fn hadamard_gram() {
        assert_eq!(CodeMatrix::sylvester_hadamard(1).unwrap().entries(), &[1]);
        assert_eq!(
            CodeMatrix::sylvester_hadamard(2).unwrap().entries(),
            &[1, 1, 1, -1]
        );
        for k in [1, 2, 4, 8, 16, 32, 64] {
            let h = CodeMatrix::sylvester_hadamard(k).unwrap();
            let g = h.column_gram();
            for i in 0..k {
                for j in 0..k {
                    assert_eq!(g[i * k + j], if i == j { k as i64 } else { 0 });
                }
            }
        }
        assert_eq!(
            CodeMatrix::sylvester_hadamard(12),
            Err(CodeError::NotPowerOfTwo(12))
        );
    }

    #[test]
    fn inverse_three_by_three() {
        let s = CodeMatrix::cyclic_s_matrix(&[1, 1, 0]).unwrap();
        let inv = s_matrix_inverse(&s).unwrap();
        // 0.5·(2Sᵀ − J)
        let expect = DMatrix::from_row_slice(3, 3, &[0.5, 0.5, -0.5, 0.5, -0.5, 0.5, -0.5, 0.5, 0.5]);
        assert_eq!(inv, expect);
        let prod = s.to_f64() * &inv;
        assert!((prod - DMatrix::identity(3, 3)).amax() < 1e-15);
    }

    #[test]
    fn inverse_rejects_other_kinds() {
        let h = CodeMatrix::sylvester_hadamard(4).unwrap();
        assert_eq!(s_matrix_inverse(&h), Err(CodeError::NotSMatrix(CodeKind::Hadamard)));
    }

    #[test]
    fn n_one_is_identity() {
        let m = build_code(CodeKind::SMatrix, 1).unwrap();
        assert_eq!(m.kind(), CodeKind::Identity);
        assert_eq!(CodeMatrix::cyclic_s_matrix(&[1]).unwrap().kind(), CodeKind::Identity);
    }

    #[test]
    fn classify_round_trips_kinds() {
        for m in [
            build_code(CodeKind::SMatrix, 31).unwrap(),
            build_code(CodeKind::Hadamard, 16).unwrap(),
            build_code(CodeKind::Identity, 5).unwrap(),
        ] {
            let again = CodeMatrix::from_entries(m.n(), m.entries().to_vec()).unwrap();
            assert_eq!(again, m);
        }
        let custom = CodeMatrix::from_entries(2, vec![1, 1, 0, 1]).unwrap();
        assert_eq!(custom.kind(), CodeKind::Custom);
        assert!(CodeMatrix::from_entries(2, vec![1, 2, 0, 1]).is_err());
        assert!(CodeMatrix::from_entries(2, vec![1, 0, 1]).is_err());
    }

    #[test]
    fn mask_geometry() {
        let m7 = MaskPattern::s_matrix(7, 1.0, 1.0).unwrap();
        assert_eq!(m7.cells().len(), 13);
        assert_eq!(m7.window(0), m7.base());
        let m31 = MaskPattern::s_matrix(31, 2.0, 1.5).unwrap();
        assert_eq!(m31.cells().len(), 61);
        assert_eq!(m31.span_mm(), 62.0);
        assert!(MaskPattern::s_matrix(7, 1.0, 1.2).is_err());
        assert!(MaskPattern::s_matrix(7, 0.0, 0.0).is_err());
    }

    #[test]
    fn mask_windows_match_rows() {
        for n in S_ORDERS {
            let mask = MaskPattern::s_matrix(n, 1.0, 1.0).unwrap();
            let s = mask.code_matrix().unwrap();
            for shift in 0..n {
                let window: Vec<i8> = mask.window(shift).iter().map(|&v| v as i8).collect();
                assert_eq!(window.as_slice(), s.row(shift));
            }
            for (k, &c) in mask.cells().iter().enumerate() {
                assert_eq!(c, mask.base()[k % n]);
            }
        }
    }
}
