use crate::error::{Error, Result};

/// Per-pixel boolean map; `true` marks shadow.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::shape(
                "BinaryMask::new",
                format!("{width}x{height} mask needs {} bits, got {}", width * height, bits.len()),
            ));
        }
        Ok(BinaryMask {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    /// Builds a mask from `f(row, col)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        BinaryMask {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_same(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::shape(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.width, self.height, other.width, other.height
                ),
            ));
        }
        Ok(())
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other, "BinaryMask::and")?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect();
        BinaryMask::new(self.width, self.height, bits)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other, "BinaryMask::or")?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect();
        BinaryMask::new(self.width, self.height, bits)
    }

    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other, "BinaryMask::and_not")?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && !b).collect();
        BinaryMask::new(self.width, self.height, bits)
    }

    /// `|self ∩ other|` and `|self ∪ other|`.
    pub fn overlap(&self, other: &BinaryMask) -> Result<(usize, usize)> {
        self.check_same(other, "BinaryMask::overlap")?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .fold((0, 0), |(i, u), (&a, &b)| {
                (i + usize::from(a && b), u + usize::from(a || b))
            }))
    }
}
