//! Single-qubit linear algebra: 2×2 complex matrices, Pauli operators,
//! density matrices, Bloch vectors and Born-rule probabilities.
//!
//! Conventions: basis state `|0⟩` is the `+1` eigenstate of σ_Z, and an
//! outcome bit `y = 1` denotes the `+1` projective outcome along the measured
//! axis.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ComplexScalar = Complex64;

const HERMITIAN_TOL: f64 = 1e-12;
const TRACE_TOL: f64 = 1e-10;
const EIGEN_TOL: f64 = 1e-9;
const BLOCH_TOL: f64 = 1e-9;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Row-major 2×2 complex matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Matrix2(pub [[Complex64; 2]; 2]);

impl Matrix2 {
    pub const fn new(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> Self {
        Matrix2([[a, b], [c, d]])
    }

    pub const fn identity() -> Self {
        Matrix2::new(ONE, ZERO, ZERO, ONE)
    }

    pub const fn zero() -> Self {
        Matrix2::new(ZERO, ZERO, ZERO, ZERO)
    }

    pub fn diag(a: f64, d: f64) -> Self {
        Matrix2::new(a.into(), ZERO, ZERO, d.into())
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.0[row][col]
    }

    pub fn trace(&self) -> Complex64 {
        self.0[0][0] + self.0[1][1]
    }

    pub fn dagger(&self) -> Self {
        let m = &self.0;
        Matrix2::new(m[0][0].conj(), m[1][0].conj(), m[0][1].conj(), m[1][1].conj())
    }

    pub fn scale(&self, s: Complex64) -> Self {
        let m = &self.0;
        Matrix2::new(m[0][0] * s, m[0][1] * s, m[1][0] * s, m[1][1] * s)
    }

    pub fn scale_re(&self, s: f64) -> Self {
        self.scale(Complex64::new(s, 0.0))
    }

    pub fn commutator(&self, other: &Matrix2) -> Self {
        *self * *other - *other * *self
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Largest absolute entry of `self - self†`.
    pub fn hermitian_residual(&self) -> f64 {
        let d = *self - self.dagger();
        d.0.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `(self + self†) / 2`.
    pub fn hermitian_part(&self) -> Self {
        (*self + self.dagger()).scale_re(0.5)
    }

    /// Real trace of `self · other` for Hermitian operands.
    pub fn trace_product(&self, other: &Matrix2) -> f64 {
        (*self * *other).trace().re
    }

    /// Largest absolute entry difference.
    pub fn max_abs_diff(&self, other: &Matrix2) -> f64 {
        let d = *self - *other;
        d.0.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

impl Add for Matrix2 {
    type Output = Matrix2;
    fn add(self, rhs: Matrix2) -> Matrix2 {
        let (a, b) = (self.0, rhs.0);
        Matrix2::new(a[0][0] + b[0][0], a[0][1] + b[0][1], a[1][0] + b[1][0], a[1][1] + b[1][1])
    }
}

impl Sub for Matrix2 {
    type Output = Matrix2;
    fn sub(self, rhs: Matrix2) -> Matrix2 {
        let (a, b) = (self.0, rhs.0);
        Matrix2::new(a[0][0] - b[0][0], a[0][1] - b[0][1], a[1][0] - b[1][0], a[1][1] - b[1][1])
    }
}

impl Mul for Matrix2 {
    type Output = Matrix2;
    fn mul(self, rhs: Matrix2) -> Matrix2 {
        let (a, b) = (self.0, rhs.0);
        Matrix2::new(
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        )
    }
}

/// Pauli axis; also the preparation / measurement setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Axis> {
        Axis::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "X",
            Axis::Y => "Y",
            Axis::Z => "Z",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Axis> {
        match s {
            "X" | "x" => Ok(Axis::X),
            "Y" | "y" => Ok(Axis::Y),
            "Z" | "z" => Ok(Axis::Z),
            other => Err(Error::invalid(format!("unknown axis {other:?}"))),
        }
    }
}

/// Outcome bit along an axis: a preparation `(y_0, a)` or a measurement
/// `(y_T, b)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label {
    axis: Axis,
    bit: bool,
}

pub type PrepLabel = Label;
pub type MeasLabel = Label;

impl Label {
    pub const fn new(axis: Axis, bit: bool) -> Self {
        Label { axis, bit }
    }

    pub fn from_bit(axis: Axis, bit: u8) -> Result<Self> {
        match bit {
            0 => Ok(Label::new(axis, false)),
            1 => Ok(Label::new(axis, true)),
            other => Err(Error::invalid(format!("outcome bit must be 0 or 1, got {other}"))),
        }
    }

    pub fn axis(self) -> Axis {
        self.axis
    }

    pub fn outcome(self) -> bool {
        self.bit
    }

    pub fn bit(self) -> u8 {
        u8::from(self.bit)
    }

    /// Position in the one-hot conditioning vector: `2·axis + y`.
    pub fn one_hot_index(self) -> usize {
        2 * self.axis.index() + usize::from(self.bit)
    }

    /// All six cardinal labels in one-hot order.
    pub fn all() -> [Label; 6] {
        let mut out = [Label::new(Axis::X, false); 6];
        for axis in Axis::ALL {
            for bit in [false, true] {
                let l = Label::new(axis, bit);
                out[l.one_hot_index()] = l;
            }
        }
        out
    }

    /// Bloch-sphere sign: `+1` for `y = 1`, `-1` for `y = 0`.
    pub fn sign(self) -> f64 {
        if self.bit {
            1.0
        } else {
            -1.0
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.bit(), self.axis)
    }
}

pub fn pauli(axis: Axis) -> Matrix2 {
    match axis {
        Axis::X => Matrix2::new(ZERO, ONE, ONE, ZERO),
        Axis::Y => Matrix2::new(ZERO, -I, I, ZERO),
        Axis::Z => Matrix2::new(ONE, ZERO, ZERO, -ONE),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlochVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl BlochVector {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let v = BlochVector { x, y, z };
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::invalid("non-finite Bloch component"));
        }
        if v.norm() > 1.0 + BLOCH_TOL {
            return Err(Error::invalid(format!("Bloch vector norm {} exceeds 1", v.norm())));
        }
        Ok(v)
    }

    pub const fn origin() -> Self {
        BlochVector { x: 0.0, y: 0.0, z: 0.0 }
    }

    pub fn component(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.x,
            Axis::Y => self.y,
            Axis::Z => self.z,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Radial projection into the closed unit ball.
    pub fn project_to_ball(self) -> Self {
        let n = self.norm();
        if n > 1.0 {
            BlochVector { x: self.x / n, y: self.y / n, z: self.z / n }
        } else {
            self
        }
    }

    /// The cardinal label whose Bloch point is nearest to this vector.
    pub fn nearest_cardinal(&self) -> Label {
        let c = self.as_array();
        let (axis, value) =
            Axis::ALL.iter().map(|&a| (a, c[a.index()])).fold((Axis::X, 0.0), |best: (Axis, f64), (a, v)| {
                if v.abs() > best.1.abs() {
                    (a, v)
                } else {
                    best
                }
            });
        Label::new(axis, value > 0.0)
    }
}

/// A valid qubit state: Hermitian, unit trace, positive semidefinite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityMatrix(Matrix2);

impl DensityMatrix {
    pub fn new(m: Matrix2) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::invalid("density matrix has non-finite entries"));
        }
        let herm = m.hermitian_residual();
        if herm > HERMITIAN_TOL {
            return Err(Error::invalid(format!("matrix is not Hermitian (residual {herm:e})")));
        }
        let tr = m.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::invalid(format!("trace {tr} differs from 1")));
        }
        let rho = DensityMatrix(m);
        let min_eig = rho.min_eigenvalue();
        if min_eig < -EIGEN_TOL {
            return Err(Error::invalid(format!("negative eigenvalue {min_eig:e}")));
        }
        Ok(rho)
    }

    pub fn maximally_mixed() -> Self {
        DensityMatrix(Matrix2::diag(0.5, 0.5))
    }

    pub fn matrix(&self) -> &Matrix2 {
        &self.0
    }

    pub fn bloch(&self) -> BlochVector {
        bloch_from_rho(self)
    }

    /// Smaller eigenvalue, `(1 - |r|) / 2`.
    pub fn min_eigenvalue(&self) -> f64 {
        let m = &self.0 .0;
        let a = m[0][0].re;
        let d = m[1][1].re;
        let half_gap = (((a - d) / 2.0).powi(2) + m[0][1].norm_sqr()).sqrt();
        (a + d) / 2.0 - half_gap
    }
}

fn bloch_components(m: &Matrix2) -> [f64; 3] {
    let m = &m.0;
    // Tr[ρσ_X] = 2 Re ρ01, Tr[ρσ_Y] = -2 Im ρ01, Tr[ρσ_Z] = ρ00 - ρ11
    [2.0 * m[0][1].re, -2.0 * m[0][1].im, m[0][0].re - m[1][1].re]
}

pub fn bloch_from_rho(rho: &DensityMatrix) -> BlochVector {
    let [x, y, z] = bloch_components(&rho.0);
    BlochVector { x, y, z }
}

pub fn rho_from_bloch(v: BlochVector) -> Result<DensityMatrix> {
    let v = BlochVector::new(v.x, v.y, v.z)?;
    let half = 0.5;
    let m = Matrix2::new(
        Complex64::new(half * (1.0 + v.z), 0.0),
        Complex64::new(half * v.x, -half * v.y),
        Complex64::new(half * v.x, half * v.y),
        Complex64::new(half * (1.0 - v.z), 0.0),
    );
    Ok(DensityMatrix(m))
}

/// Pure eigenstate of `σ_axis` with eigenvalue `+1` for `y = 1` and `-1` for
/// `y = 0`.
pub fn cardinal_state(prep: PrepLabel) -> DensityMatrix {
    let s = prep.sign();
    let v = match prep.axis() {
        Axis::X => BlochVector { x: s, y: 0.0, z: 0.0 },
        Axis::Y => BlochVector { x: 0.0, y: s, z: 0.0 },
        Axis::Z => BlochVector { x: 0.0, y: 0.0, z: s },
    };
    rho_from_bloch(v).expect("cardinal points lie on the unit sphere")
}

/// Probability of the outcome `y = 1`, `(Tr[ρσ_axis] + 1) / 2`, clamped to `[0, 1]`.
pub fn born_probability(rho: &DensityMatrix, axis: Axis) -> f64 {
    let r = bloch_components(&rho.0)[axis.index()];
    ((r + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// `Tr[ρ²]`.
pub fn purity(rho: &DensityMatrix) -> f64 {
    let m = &rho.0 .0;
    m[0][0].norm_sqr() + m[1][1].norm_sqr() + 2.0 * m[0][1].norm_sqr()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn approx(a: &Matrix2, b: &Matrix2, tol: f64) -> bool {
        a.max_abs_diff(b) <= tol
    }

    #[test]
    fn pauli_matrices() {
        assert_eq!(pauli(Axis::Z), Matrix2::diag(1.0, -1.0));
        assert_eq!(pauli(Axis::X), Matrix2::new(ZERO, ONE, ONE, ZERO));
        assert_eq!(pauli(Axis::Y), Matrix2::new(ZERO, -I, I, ZERO));
        // σ_X σ_Y = i σ_Z
        assert!(approx(&(pauli(Axis::X) * pauli(Axis::Y)), &pauli(Axis::Z).scale(I), 0.0));
    }

    #[test]
    fn bloch_of_reference_states() {
        let up = DensityMatrix::new(Matrix2::diag(1.0, 0.0)).unwrap();
        assert_eq!(up.bloch().as_array(), [0.0, 0.0, 1.0]);
        assert_eq!(DensityMatrix::maximally_mixed().bloch().as_array(), [0.0, 0.0, 0.0]);
        let plus_x = DensityMatrix::new((Matrix2::identity() + pauli(Axis::X)).scale_re(0.5)).unwrap();
        assert_eq!(plus_x.bloch().as_array(), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn rho_from_reference_vectors() {
        let r = rho_from_bloch(BlochVector::new(0.0, 0.0, 1.0).unwrap()).unwrap();
        assert!(approx(r.matrix(), &Matrix2::diag(1.0, 0.0), 0.0));
        let r = rho_from_bloch(BlochVector::origin()).unwrap();
        assert!(approx(r.matrix(), &Matrix2::diag(0.5, 0.5), 0.0));
        let r = rho_from_bloch(BlochVector::new(0.0, 1.0, 0.0).unwrap()).unwrap();
        let expected = (Matrix2::identity() + pauli(Axis::Y)).scale_re(0.5);
        assert!(approx(r.matrix(), &expected, 1e-15));
    }

    #[test]
    fn rejects_vectors_outside_ball() {
        assert!(BlochVector::new(1.0, 0.1, 0.0).is_err());
        assert!(BlochVector::new(1.0 + 5e-10, 0.0, 0.0).is_ok());
        assert!(BlochVector::new(f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn density_matrix_validation() {
        assert!(DensityMatrix::new(Matrix2::diag(0.7, 0.2)).is_err());
        assert!(DensityMatrix::new(Matrix2::diag(1.2, -0.2)).is_err());
        let non_herm = Matrix2::new(0.5.into(), ONE, ZERO, 0.5.into());
        assert!(DensityMatrix::new(non_herm).is_err());
    }

    #[test]
    fn cardinal_states() {
        let z1 = cardinal_state(Label::new(Axis::Z, true));
        assert!(approx(z1.matrix(), &Matrix2::diag(1.0, 0.0), 0.0));
        let z0 = cardinal_state(Label::new(Axis::Z, false));
        assert!(approx(z0.matrix(), &Matrix2::diag(0.0, 1.0), 0.0));
        let x1 = cardinal_state(Label::new(Axis::X, true));
        let expected = (Matrix2::identity() + pauli(Axis::X)).scale_re(0.5);
        assert!(approx(x1.matrix(), &expected, 0.0));
    }

    #[test]
    fn born_probabilities() {
        let up = cardinal_state(Label::new(Axis::Z, true));
        assert_eq!(born_probability(&up, Axis::Z), 1.0);
        assert_eq!(born_probability(&DensityMatrix::maximally_mixed(), Axis::X), 0.5);
        let partial = rho_from_bloch(BlochVector::new(0.0, 0.0, 0.6).unwrap()).unwrap();
        assert!((born_probability(&partial, Axis::Z) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn purity_values() {
        assert_eq!(purity(&cardinal_state(Label::new(Axis::Z, true))), 1.0);
        assert_eq!(purity(&DensityMatrix::maximally_mixed()), 0.5);
        let half = rho_from_bloch(BlochVector::new(0.0, 0.0, 0.5).unwrap()).unwrap();
        assert!((purity(&half) - 0.625).abs() < 1e-15);
    }

    #[test]
    fn cardinal_born_is_deterministic() {
        for label in Label::all() {
            let p = born_probability(&cardinal_state(label), label.axis());
            assert_eq!(p, if label.outcome() { 1.0 } else { 0.0 }, "{label}");
        }
    }

    #[test]
    fn one_hot_indices_are_distinct() {
        let mut seen = [false; 6];
        for l in Label::all() {
            assert!(!seen[l.one_hot_index()]);
            seen[l.one_hot_index()] = true;
        }
        assert!(Label::from_bit(Axis::X, 2).is_err());
    }

    #[test]
    fn nearest_cardinal_picks_dominant_component() {
        let v = BlochVector::new(0.1, -0.7, 0.3).unwrap();
        assert_eq!(v.nearest_cardinal(), Label::new(Axis::Y, false));
    }

    fn ball() -> impl Strategy<Value = BlochVector> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(x, y, z)| BlochVector { x, y, z }.project_to_ball())
    }

    proptest! {
        #[test]
        fn bloch_round_trip(v in ball()) {
            let back = bloch_from_rho(&rho_from_bloch(v).unwrap());
            prop_assert!((back.x - v.x).abs() < 1e-12);
            prop_assert!((back.y - v.y).abs() < 1e-12);
            prop_assert!((back.z - v.z).abs() < 1e-12);
        }

        #[test]
        fn purity_matches_bloch_norm(v in ball()) {
            let rho = rho_from_bloch(v).unwrap();
            let expected = (1.0 + v.norm().powi(2)) / 2.0;
            prop_assert!((purity(&rho) - expected).abs() < 1e-12);
            prop_assert!(rho.min_eigenvalue() >= -1e-12);
        }
    }
}
