//! Lattice sites and sup-norm boxes in Z^d.

use std::fmt;
use std::ops::{Add, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest lattice dimension supported by the fixed-size site representation.
pub const MAX_DIM: usize = 4;

/// A point of Z^d, stored padded with zeros up to [`MAX_DIM`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Site([i32; MAX_DIM]);

impl Site {
    pub const ORIGIN: Site = Site([0; MAX_DIM]);

    pub fn new(coords: &[i32]) -> Self {
        assert!(coords.len() <= MAX_DIM, "site dimension {} > {MAX_DIM}", coords.len());
        let mut c = [0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Site(c)
    }

    /// The unit vector `sign * e_axis` (axis counted from 0).
    pub fn unit(axis: usize, sign: i32) -> Self {
        let mut c = [0; MAX_DIM];
        c[axis] = sign;
        Site(c)
    }

    pub fn coord(&self, axis: usize) -> i32 {
        self.0[axis]
    }

    pub fn coords(&self, dim: usize) -> &[i32] {
        &self.0[..dim]
    }

    /// `|x| = max_i |x_i|`.
    pub fn sup_norm(&self) -> u32 {
        self.0.iter().map(|c| c.unsigned_abs()).max().unwrap_or(0)
    }

    pub fn l1_norm(&self) -> u32 {
        self.0.iter().map(|c| c.unsigned_abs()).sum()
    }

    pub fn euclidean_norm(&self) -> f64 {
        self.0.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>().sqrt()
    }

    pub fn dist(&self, other: &Site) -> u32 {
        (*self - *other).sup_norm()
    }

    pub fn scale(&self, k: i32) -> Site {
        Site(self.0.map(|c| c * k))
    }
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // trailing padding zeros are omitted
        let used = self.0.iter().rposition(|&c| c != 0).map_or(1, |p| p + 1);
        f.debug_list().entries(&self.0[..used]).finish()
    }
}

impl Add for Site {
    type Output = Site;
    fn add(self, rhs: Site) -> Site {
        let mut c = self.0;
        for (a, b) in c.iter_mut().zip(rhs.0) {
            *a += b;
        }
        Site(c)
    }
}

impl Sub for Site {
    type Output = Site;
    fn sub(self, rhs: Site) -> Site {
        self + (-rhs)
    }
}

impl Neg for Site {
    type Output = Site;
    fn neg(self) -> Site {
        Site(self.0.map(|c| -c))
    }
}

/// `{x : |x - center| <= radius}` with the sup norm.
///
/// Sites are enumerated lexicographically with the first coordinate varying
/// slowest; [`BoxRegion::index_of`] and [`BoxRegion::site_at`] follow that order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub dim: usize,
    pub center: Site,
    pub radius: u32,
}

impl Serialize for Site {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Site {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<i32>::deserialize(d)?;
        if v.len() > MAX_DIM {
            return Err(serde::de::Error::custom(format!("site has more than {MAX_DIM} coordinates")));
        }
        Ok(Site::new(&v))
    }
}

impl BoxRegion {
    pub fn new(dim: usize, center: Site, radius: u32) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self { dim, center, radius })
    }

    pub fn centered(dim: usize, radius: u32) -> Result<Self> {
        Self::new(dim, Site::ORIGIN, radius)
    }

    pub fn side(&self) -> usize {
        2 * self.radius as usize + 1
    }

    pub fn len(&self) -> usize {
        self.side().pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, site: &Site) -> bool {
        site.dist(&self.center) <= self.radius
    }

    pub fn translated(&self, a: Site) -> BoxRegion {
        BoxRegion { center: self.center + a, ..*self }
    }

    /// Does `self` contain every site of `other`?
    pub fn covers(&self, other: &BoxRegion) -> bool {
        self.dim == other.dim && other.center.dist(&self.center) + other.radius <= self.radius
    }

    pub fn index_of(&self, site: &Site) -> Option<usize> {
        let r = self.radius as i32;
        let side = self.side();
        let mut idx = 0usize;
        for axis in 0..self.dim {
            let off = site.coord(axis) - self.center.coord(axis) + r;
            if off < 0 || off as usize >= side {
                return None;
            }
            idx = idx * side + off as usize;
        }
        Some(idx)
    }

    pub fn site_at(&self, mut idx: usize) -> Site {
        let side = self.side();
        let r = self.radius as i32;
        let mut c = [0i32; MAX_DIM];
        for axis in (0..self.dim).rev() {
            c[axis] = (idx % side) as i32 - r + self.center.coord(axis);
            idx /= side;
        }
        Site(c)
    }

    /// Index stride of a unit step along `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        self.side().pow((self.dim - 1 - axis) as u32)
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        (0..self.len()).map(move |i| self.site_at(i))
    }
}

pub(crate) fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim > MAX_DIM {
        return Err(Error::InvalidParameter(format!("dimension {dim} not in 1..={MAX_DIM}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip_lexicographic() {
        let b = BoxRegion::new(3, Site::new(&[1, -2, 0]), 2).unwrap();
        assert_eq!(b.len(), 125);
        let mut prev = None;
        for (i, s) in b.sites().enumerate() {
            assert_eq!(b.index_of(&s), Some(i));
            assert!(b.contains(&s));
            if let Some(p) = prev {
                assert!(p < s);
            }
            prev = Some(s);
        }
        assert_eq!(b.index_of(&Site::new(&[4, 0, 0])), None);
    }

    #[test]
    fn sup_norm_and_strides() {
        assert_eq!(Site::new(&[-3, 2]).sup_norm(), 3);
        let b = BoxRegion::centered(2, 1).unwrap();
        let s = Site::new(&[0, 0]);
        let i = b.index_of(&s).unwrap();
        assert_eq!(b.index_of(&(s + Site::unit(0, 1))), Some(i + b.stride(0)));
        assert_eq!(b.index_of(&(s + Site::unit(1, -1))), Some(i - b.stride(1)));
    }

    #[test]
    fn covers() {
        let outer = BoxRegion::centered(2, 5).unwrap();
        assert!(outer.covers(&BoxRegion::new(2, Site::new(&[2, 0]), 3).unwrap()));
        assert!(!outer.covers(&BoxRegion::new(2, Site::new(&[3, 0]), 3).unwrap()));
    }
}
