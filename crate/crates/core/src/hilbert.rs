//! Hilbert space-filling curve over a `2^order × 2^order` grid.
//!
//! The curve enters at `(0, 0)` and exits at `(0, 2^order - 1)`; the
//! order-1 curve is the cup `(0,0) → (1,0) → (1,1) → (0,1)`. Cells are
//! `(row, col)`.

use crate::error::{Error, Result};

/// Largest supported order; 4^16 cells already exceeds any patch grid.
pub const MAX_ORDER: u32 = 16;

/// Bijection between curve timesteps and grid cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HilbertOrdering {
    order: u32,
    forward: Vec<(usize, usize)>,
    inverse: Vec<usize>,
}

impl HilbertOrdering {
    pub fn new(order: u32) -> Result<Self> {
        hilbert_curve(order)
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    /// Grid side `2^order`.
    pub fn side(&self) -> usize {
        1 << self.order
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Cells in visiting order.
    pub fn cells(&self) -> &[(usize, usize)] {
        &self.forward
    }

    pub fn cell(&self, step: usize) -> (usize, usize) {
        self.forward[step]
    }

    /// Timestep at which `(row, col)` is visited.
    pub fn step_of(&self, row: usize, col: usize) -> usize {
        self.inverse[row * self.side() + col]
    }

    /// Reorders a row-major grid of payloads into curve order.
    pub fn reorder<T: Clone>(&self, grid: &[T]) -> Result<Vec<T>> {
        self.expect_len(grid.len())?;
        Ok(self
            .forward
            .iter()
            .map(|&(r, c)| grid[r * self.side() + c].clone())
            .collect())
    }

    /// Inverse of [`HilbertOrdering::reorder`]: curve order back to row-major.
    pub fn restore<T: Clone>(&self, sequence: &[T]) -> Result<Vec<T>> {
        self.expect_len(sequence.len())?;
        Ok(self.inverse.iter().map(|&t| sequence[t].clone()).collect())
    }

    fn expect_len(&self, n: usize) -> Result<()> {
        if n != self.len() {
            return Err(Error::shape(format!(
                "order-{} ordering covers {} cells, got {n}",
                self.order,
                self.len()
            )));
        }
        Ok(())
    }
}

/// Builds the order-`order` curve.
pub fn hilbert_curve(order: u32) -> Result<HilbertOrdering> {
    if order == 0 || order > MAX_ORDER {
        return Err(Error::arg(format!(
            "Hilbert order must be in 1..={MAX_ORDER}, got {order}"
        )));
    }
    let side = 1usize << order;
    let n = side * side;
    let forward: Vec<(usize, usize)> = (0..n).map(|d| step_to_cell(side, d)).collect();
    let mut inverse = vec![0; n];
    for (t, &(r, c)) in forward.iter().enumerate() {
        inverse[r * side + c] = t;
    }
    Ok(HilbertOrdering {
        order,
        forward,
        inverse,
    })
}

/// Maps a distance along the curve to `(row, col)`. Works from the
/// finest quadrant outward: at each scale the lower-left and lower-right
/// quadrants of the unit "cup" are reflected so sub-curves join end to end.
fn step_to_cell(side: usize, step: usize) -> (usize, usize) {
    let (mut col, mut row) = (0usize, 0usize);
    let mut t = step;
    let mut s = 1;
    while s < side {
        let rx = 1 & (t / 2);
        let ry = 1 & (t ^ rx);
        if ry == 0 {
            if rx == 1 {
                col = s - 1 - col;
                row = s - 1 - row;
            }
            std::mem::swap(&mut col, &mut row);
        }
        col += s * rx;
        row += s * ry;
        t /= 4;
        s *= 2;
    }
    (row, col)
}

/// Sequence order for the 8×8 patch grid.
pub fn patch_ordering() -> HilbertOrdering {
    hilbert_curve(3).expect("order 3 is valid")
}

/// Puts row-major per-cell payloads into curve order. The ordering must
/// be order 3 (8×8 grid).
pub fn reorder_features<T: Clone>(grid: &[T], ordering: &HilbertOrdering) -> Result<Vec<T>> {
    if ordering.order() != 3 {
        return Err(Error::shape(format!(
            "patch features need an order-3 ordering, got order {}",
            ordering.order()
        )));
    }
    ordering.reorder(grid)
}
