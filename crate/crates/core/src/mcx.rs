//! Multicomplex numbers up to order 3.
//!
//! An order-`n` multicomplex number is `z₁ + z₂·iₙ` with `z₁, z₂` of order
//! `n-1`; all imaginary units commute and square to `-1`. Coefficients are
//! stored flat, indexed by the bitmask of the imaginary directions in the
//! basis element: `parts[0]` is the real part, `parts[0b011]` the `i₁i₂`
//! coefficient, `parts[0b111]` the `i₁i₂i₃` coefficient.
//!
//! Evaluating a real function on `x + h·i₁ + h·i₂ + h·i₃` yields its
//! derivatives in the mixed parts without any subtractive cancellation:
//! `f'(x) ≈ parts[0b001]/h`, `f''(x) ≈ parts[0b011]/h²`,
//! `f'''(x) ≈ parts[0b111]/h³`.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 3;
const MAX_PARTS: usize = 1 << MAX_ORDER;

#[derive(Clone, Copy, PartialEq)]
pub struct MultiComplex {
    order: u8,
    parts: [f64; MAX_PARTS],
}

impl MultiComplex {
    /// Builds a number from its `2^order` coefficients.
    pub fn new(order: usize, parts: &[f64]) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::OrderOutOfRange(order));
        }
        if parts.len() != 1 << order {
            return Err(Error::Dimension {
                expected: 1 << order,
                got: parts.len(),
                context: "multicomplex parts",
            });
        }
        let mut p = [0.0; MAX_PARTS];
        p[..parts.len()].copy_from_slice(parts);
        Ok(Self {
            order: order as u8,
            parts: p,
        })
    }

    /// Embeds a real number at the given order with zero imaginary parts.
    pub fn promote(x: f64, order: usize) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::OrderOutOfRange(order));
        }
        let mut parts = [0.0; MAX_PARTS];
        parts[0] = x;
        Ok(Self {
            order: order as u8,
            parts,
        })
    }

    pub const fn real(x: f64) -> Self {
        let mut parts = [0.0; MAX_PARTS];
        parts[0] = x;
        Self { order: 0, parts }
    }

    /// The imaginary unit `i_dir` (1-based direction).
    pub fn unit(dir: usize) -> Result<Self> {
        if dir == 0 || dir > MAX_ORDER {
            return Err(Error::DirectionOutOfRange { dir, order: MAX_ORDER });
        }
        let mut parts = [0.0; MAX_PARTS];
        parts[1 << (dir - 1)] = 1.0;
        Ok(Self {
            order: dir as u8,
            parts,
        })
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.order as usize
    }

    #[inline]
    pub fn len(&self) -> usize {
        1 << self.order
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn re(&self) -> f64 {
        self.parts[0]
    }

    /// All `2^order` coefficients.
    #[inline]
    pub fn parts(&self) -> &[f64] {
        &self.parts[..self.len()]
    }

    /// Coefficient of the basis element with the given direction bitmask.
    #[inline]
    pub fn part(&self, mask: usize) -> f64 {
        self.parts[mask]
    }

    #[inline]
    pub fn set_part(&mut self, mask: usize, value: f64) {
        debug_assert!(mask < self.len());
        self.parts[mask] = value;
    }

    /// Same value viewed at a higher order. Lowering is not allowed.
    pub fn with_order(mut self, order: usize) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::OrderOutOfRange(order));
        }
        if order < self.order() {
            return Err(Error::InvalidParameter(format!(
                "cannot lower order {} to {}",
                self.order, order
            )));
        }
        self.order = order as u8;
        Ok(self)
    }

    /// Coefficient of the product of the given (1-based) imaginary
    /// directions, e.g. `&[1, 2]` picks the `i₁i₂` part.
    pub fn im_extract(&self, dirs: &[usize]) -> Result<f64> {
        let mut mask = 0usize;
        for &d in dirs {
            if d == 0 || d > self.order() {
                return Err(Error::DirectionOutOfRange {
                    dir: d,
                    order: self.order(),
                });
            }
            mask |= 1 << (d - 1);
        }
        Ok(self.parts[mask])
    }

    /// `self + w·i_dir` where `w` does not use direction `dir` or above.
    pub fn with_component(&self, dir: usize, w: MultiComplex) -> Self {
        debug_assert!(dir >= 1 && dir <= MAX_ORDER && w.order() < dir);
        let mut out = *self;
        out.order = out.order.max(dir as u8);
        let bit = 1 << (dir - 1);
        for m in 0..w.len() {
            out.parts[m | bit] += w.parts[m];
        }
        out
    }

    /// The coefficient of `i_top` where `top` is this number's highest
    /// direction, returned as a number of order `top - 1`.
    pub fn top_component(&self) -> Self {
        let n = self.order();
        debug_assert!(n >= 1);
        let half = 1 << (n - 1);
        let mut parts = [0.0; MAX_PARTS];
        parts[..half].copy_from_slice(&self.parts[half..2 * half]);
        Self {
            order: (n - 1) as u8,
            parts,
        }
    }

    /// Splits `z = u + v·i_n` at the top direction.
    fn split(&self) -> (Self, Self) {
        let n = self.order();
        let half = 1 << (n - 1);
        let mut u = [0.0; MAX_PARTS];
        let mut v = [0.0; MAX_PARTS];
        u[..half].copy_from_slice(&self.parts[..half]);
        v[..half].copy_from_slice(&self.parts[half..2 * half]);
        let o = (n - 1) as u8;
        (Self { order: o, parts: u }, Self { order: o, parts: v })
    }

    /// Inverse of [`split`]: `u + v·i_n` with `n = order(u) + 1`.
    fn join(u: Self, v: Self) -> Self {
        let o = u.order.max(v.order);
        let half = 1 << o;
        let mut parts = [0.0; MAX_PARTS];
        parts[..half].copy_from_slice(&u.parts[..half]);
        parts[half..2 * half].copy_from_slice(&v.parts[..half]);
        Self { order: o + 1, parts }
    }

    #[inline]
    pub fn scale(mut self, k: f64) -> Self {
        for p in &mut self.parts[..1 << self.order] {
            *p *= k;
        }
        self
    }

    /// Product that drops every term in which an imaginary direction
    /// appears twice. At order 1 this keeps exactly the terms linear in the
    /// perturbation.
    pub fn mul_truncated(self, rhs: Self) -> Self {
        let order = self.order.max(rhs.order);
        let n = 1usize << order;
        let mut parts = [0.0; MAX_PARTS];
        for a in 0..n {
            let x = self.parts[a];
            if x == 0.0 {
                continue;
            }
            for b in 0..n {
                if a & b == 0 {
                    parts[a | b] += x * rhs.parts[b];
                }
            }
        }
        Self { order, parts }
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|p| p.is_finite())
    }

    /// Largest coefficient magnitude.
    pub fn max_abs(&self) -> f64 {
        self.parts().iter().fold(0.0, |m, p| m.max(p.abs()))
    }

    fn trig(self) -> Trig {
        if self.order == 0 {
            let x = self.parts[0];
            let (s, c) = x.sin_cos();
            return Trig {
                sin: Self::real(s),
                cos: Self::real(c),
                sinh: Self::real(x.sinh()),
                cosh: Self::real(x.cosh()),
            };
        }
        let (u, v) = self.split();
        let tu = u.trig();
        let tv = v.trig();
        // sin(u + v i) = sin u cosh v + cos u sinh v i, and likewise for the rest.
        Trig {
            sin: Self::join(tu.sin * tv.cosh, tu.cos * tv.sinh),
            cos: Self::join(tu.cos * tv.cosh, -(tu.sin * tv.sinh)),
            sinh: Self::join(tu.sinh * tv.cos, tu.cosh * tv.sin),
            cosh: Self::join(tu.cosh * tv.cos, tu.sinh * tv.sin),
        }
    }

    pub fn sin(self) -> Self {
        if self.order == 0 {
            return Self::real(self.parts[0].sin());
        }
        self.trig().sin
    }

    pub fn cos(self) -> Self {
        if self.order == 0 {
            return Self::real(self.parts[0].cos());
        }
        self.trig().cos
    }

    pub fn sinh(self) -> Self {
        if self.order == 0 {
            return Self::real(self.parts[0].sinh());
        }
        self.trig().sinh
    }

    pub fn cosh(self) -> Self {
        if self.order == 0 {
            return Self::real(self.parts[0].cosh());
        }
        self.trig().cosh
    }

    /// `sin` and `cos` from one recursion.
    pub fn sin_cos(self) -> (Self, Self) {
        if self.order == 0 {
            let (s, c) = self.parts[0].sin_cos();
            return (Self::real(s), Self::real(c));
        }
        let t = self.trig();
        (t.sin, t.cos)
    }

    pub fn exp(self) -> Self {
        if self.order == 0 {
            return Self::real(self.parts[0].exp());
        }
        let (u, v) = self.split();
        let eu = u.exp();
        let (s, c) = v.sin_cos();
        Self::join(eu * c, eu * s)
    }

    /// Multiplicative inverse: `(u + v i)⁻¹ = (u - v i) / (u² + v²)`.
    pub fn recip(self) -> Self {
        if self.order == 0 {
            return Self::real(1.0 / self.parts[0]);
        }
        let (u, v) = self.split();
        let d = (u * u + v * v).recip();
        Self::join(u * d, -(v * d))
    }

    /// Real matrix form: `[[z₀, -z₁], [z₁, z₀]]` applied recursively, giving a
    /// `2^n × 2^n` matrix whose first column holds the coefficients.
    pub fn cr_matrix(&self) -> DMatrix<f64> {
        if self.order == 0 {
            return DMatrix::from_element(1, 1, self.parts[0]);
        }
        let (u, v) = self.split();
        let a = u.cr_matrix();
        let b = v.cr_matrix();
        let h = a.nrows();
        let mut m = DMatrix::zeros(2 * h, 2 * h);
        m.view_mut((0, 0), (h, h)).copy_from(&a);
        m.view_mut((h, h), (h, h)).copy_from(&a);
        m.view_mut((h, 0), (h, h)).copy_from(&b);
        m.view_mut((0, h), (h, h)).copy_from(&(-b));
        m
    }
}

struct Trig {
    sin: MultiComplex,
    cos: MultiComplex,
    sinh: MultiComplex,
    cosh: MultiComplex,
}

impl Default for MultiComplex {
    fn default() -> Self {
        Self::real(0.0)
    }
}

impl From<f64> for MultiComplex {
    fn from(x: f64) -> Self {
        Self::real(x)
    }
}

impl fmt::Debug for MultiComplex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for MultiComplex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.parts[0])?;
        for m in 1..self.len() {
            write!(f, " {:+e}", self.parts[m])?;
            for d in 0..MAX_ORDER {
                if m & (1 << d) != 0 {
                    write!(f, "·i{}", d + 1)?;
                }
            }
        }
        Ok(())
    }
}

impl Add for MultiComplex {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let order = self.order.max(rhs.order);
        let mut parts = self.parts;
        for m in 0..1usize << order {
            parts[m] += rhs.parts[m];
        }
        Self { order, parts }
    }
}

impl Sub for MultiComplex {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let order = self.order.max(rhs.order);
        let mut parts = self.parts;
        for m in 0..1usize << order {
            parts[m] -= rhs.parts[m];
        }
        Self { order, parts }
    }
}

impl Neg for MultiComplex {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        for p in &mut self.parts[..1 << self.order] {
            *p = -*p;
        }
        self
    }
}

impl Mul for MultiComplex {
    type Output = Self;
    /// `i_A · i_B = (-1)^{|A∩B|} i_{A⊕B}`, which is the recursive rule
    /// `(z₁+z₂iₙ)(w₁+w₂iₙ) = (z₁w₁ − z₂w₂) + (z₁w₂ + z₂w₁)iₙ` unrolled.
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let order = self.order.max(rhs.order);
        if order == 0 {
            return Self::real(self.parts[0] * rhs.parts[0]);
        }
        let n = 1usize << order;
        let mut parts = [0.0; MAX_PARTS];
        for a in 0..n {
            let x = self.parts[a];
            if x == 0.0 {
                continue;
            }
            for b in 0..n {
                let t = x * rhs.parts[b];
                if (a & b).count_ones() % 2 == 0 {
                    parts[a ^ b] += t;
                } else {
                    parts[a ^ b] -= t;
                }
            }
        }
        Self { order, parts }
    }
}

impl Div for MultiComplex {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        self * rhs.recip()
    }
}

impl AddAssign for MultiComplex {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl SubAssign for MultiComplex {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl MulAssign for MultiComplex {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

/// Number type the network, the elastic model and the reduced residual are
/// generic over: plain `f64` or a [`MultiComplex`].
pub trait Scalar:
    Copy
    + Send
    + Sync
    + fmt::Debug
    + Default
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn from_real(x: f64) -> Self;
    fn re(&self) -> f64;
    fn scale(self, k: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn recip(self) -> Self;
    fn is_finite(&self) -> bool;
    fn to_mc(self) -> MultiComplex;
    /// Inverse of `to_mc`. For `f64` only the real part survives.
    fn from_mc(z: MultiComplex) -> Self;
    /// Product used on reverse passes; see [`MultiComplex::mul_truncated`].
    fn mul_truncated(self, rhs: Self) -> Self {
        self * rhs
    }
    fn zero() -> Self {
        Self::from_real(0.0)
    }
    /// Highest imaginary direction in use (0 for reals).
    fn order(&self) -> usize {
        0
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_real(x: f64) -> Self {
        x
    }
    #[inline]
    fn re(&self) -> f64 {
        *self
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        self * k
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn recip(self) -> Self {
        1.0 / self
    }
    #[inline]
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
    #[inline]
    fn to_mc(self) -> MultiComplex {
        MultiComplex::real(self)
    }
    #[inline]
    fn from_mc(z: MultiComplex) -> Self {
        z.re()
    }
}

impl Scalar for MultiComplex {
    #[inline]
    fn from_real(x: f64) -> Self {
        MultiComplex::real(x)
    }
    #[inline]
    fn re(&self) -> f64 {
        self.parts[0]
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        MultiComplex::scale(self, k)
    }
    fn sin(self) -> Self {
        MultiComplex::sin(self)
    }
    fn cos(self) -> Self {
        MultiComplex::cos(self)
    }
    fn exp(self) -> Self {
        MultiComplex::exp(self)
    }
    fn recip(self) -> Self {
        MultiComplex::recip(self)
    }
    fn is_finite(&self) -> bool {
        MultiComplex::is_finite(self)
    }
    #[inline]
    fn to_mc(self) -> MultiComplex {
        self
    }
    #[inline]
    fn from_mc(z: MultiComplex) -> Self {
        z
    }
    fn mul_truncated(self, rhs: Self) -> Self {
        MultiComplex::mul_truncated(self, rhs)
    }
    fn order(&self) -> usize {
        MultiComplex::order(self)
    }
}

/// Highest order among a slice of scalars.
pub fn max_order<S: Scalar>(xs: &[S]) -> usize {
    xs.iter().map(Scalar::order).max().unwrap_or(0)
}
