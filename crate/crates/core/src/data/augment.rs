use crate::error::{Error, Result};

/// The eight right-angle symmetries of a square patch.
///
/// Each element is stored as the integer matrix that maps centred output
/// coordinates `(2i - (n-1), 2j - (n-1))` to the source coordinates it reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dihedral {
    Identity,
    /// Counter-clockwise quarter turn.
    Rot90,
    Rot180,
    Rot270,
    /// Mirror left-right.
    FlipH,
    /// Mirror top-bottom.
    FlipV,
    /// Mirror about the main diagonal.
    Transpose,
    /// Mirror about the anti-diagonal.
    AntiTranspose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    fn matrix(self) -> [[i32; 2]; 2] {
        match self {
            Dihedral::Identity => [[1, 0], [0, 1]],
            Dihedral::Rot90 => [[0, 1], [-1, 0]],
            Dihedral::Rot180 => [[-1, 0], [0, -1]],
            Dihedral::Rot270 => [[0, -1], [1, 0]],
            Dihedral::FlipH => [[1, 0], [0, -1]],
            Dihedral::FlipV => [[-1, 0], [0, 1]],
            Dihedral::Transpose => [[0, 1], [1, 0]],
            Dihedral::AntiTranspose => [[0, -1], [-1, 0]],
        }
    }

    fn from_matrix(m: [[i32; 2]; 2]) -> Self {
        *Self::ALL
            .iter()
            .find(|d| d.matrix() == m)
            .expect("dihedral group is closed")
    }

    /// The op equivalent to applying `self` and then `next`.
    pub fn then(self, next: Dihedral) -> Dihedral {
        let a = self.matrix();
        let b = next.matrix();
        let mut m = [[0; 2]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Self::from_matrix(m)
    }

    pub fn inverse(self) -> Dihedral {
        *Self::ALL
            .iter()
            .find(|d| self.then(**d) == Dihedral::Identity)
            .expect("every element has an inverse")
    }

    pub fn tag(self) -> u8 {
        Self::ALL.iter().position(|&d| d == self).unwrap() as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Dihedral::Identity => "identity",
            Dihedral::Rot90 => "rot90",
            Dihedral::Rot180 => "rot180",
            Dihedral::Rot270 => "rot270",
            Dihedral::FlipH => "flipH",
            Dihedral::FlipV => "flipV",
            Dihedral::Transpose => "transpose",
            Dihedral::AntiTranspose => "antitranspose",
        }
    }

    /// Applies the symmetry to a row-major `size x size` patch.
    pub fn apply<T: Copy>(self, patch: &[T], size: usize) -> Result<Vec<T>> {
        if patch.len() != size * size {
            return Err(Error::Dimension(format!(
                "augmentation needs a square patch, got {} values for side {size}",
                patch.len()
            )));
        }
        let m = self.matrix();
        let n1 = size as i32 - 1;
        let mut out = Vec::with_capacity(patch.len());
        for i in 0..size as i32 {
            for j in 0..size as i32 {
                let (u, v) = (2 * i - n1, 2 * j - n1);
                let su = m[0][0] * u + m[0][1] * v;
                let sv = m[1][0] * u + m[1][1] * v;
                let (si, sj) = ((su + n1) / 2, (sv + n1) / 2);
                out.push(patch[(si * size as i32 + sj) as usize]);
            }
        }
        Ok(out)
    }

    /// Applies the same symmetry to an (input, target) pair.
    pub fn apply_pair<T: Copy>(self, input: &[T], target: &[T], size: usize) -> Result<(Vec<T>, Vec<T>)> {
        Ok((self.apply(input, size)?, self.apply(target, size)?))
    }
}
