//! Shared scalar storage with runtime-checked disjoint borrows.
//!
//! The backward pass writes fresh gradients at higher offsets while the
//! progress context reduces a completed window at lower offsets, both on the
//! same allocation. Every access goes through a [`Region`] claim; claims on
//! overlapping ranges are refused, so two threads never alias a scalar.

use std::cell::UnsafeCell;
use std::ops::{Deref, DerefMut, Range};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

struct Inner<T> {
    cells: Box<[UnsafeCell<T>]>,
    claims: Mutex<Vec<Range<usize>>>,
}

// SAFETY: element access only happens through `Region`, and the claim list
// guarantees live regions never overlap.
unsafe impl<T: Send> Sync for Inner<T> {}

pub struct SharedSlab<T> {
    inner: Arc<Inner<T>>,
}

impl<T> Clone for SharedSlab<T> {
    fn clone(&self) -> Self {
        SharedSlab {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Copy + Default + Send> SharedSlab<T> {
    pub fn new(len: usize) -> Self {
        Self::from_vec(vec![T::default(); len])
    }

    pub fn from_vec(values: Vec<T>) -> Self {
        let cells = values.into_iter().map(UnsafeCell::new).collect();
        SharedSlab {
            inner: Arc::new(Inner {
                cells,
                claims: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Exclusive access to `range` until the returned region is dropped.
    pub fn claim(&self, range: Range<usize>) -> Result<Region<T>> {
        if range.start > range.end || range.end > self.len() {
            return Err(Error::Pool(format!(
                "range {}..{} outside slab of {}",
                range.start,
                range.end,
                self.len()
            )));
        }
        let mut claims = self.inner.claims.lock().unwrap();
        if !range.is_empty()
            && claims
                .iter()
                .any(|c| c.start < range.end && range.start < c.end)
        {
            return Err(Error::RegionBusy {
                start: range.start,
                end: range.end,
            });
        }
        claims.push(range.clone());
        Ok(Region {
            inner: Arc::clone(&self.inner),
            range,
        })
    }

    pub fn with_region<R>(&self, range: Range<usize>, f: impl FnOnce(&mut [T]) -> R) -> Result<R> {
        let mut region = self.claim(range)?;
        Ok(f(&mut region))
    }

    pub fn to_vec(&self) -> Result<Vec<T>> {
        self.with_region(0..self.len(), |s| s.to_vec())
    }
}

pub struct Region<T> {
    inner: Arc<Inner<T>>,
    range: Range<usize>,
}

// SAFETY: a region is the unique accessor of its range.
unsafe impl<T: Send> Send for Region<T> {}

impl<T> Region<T> {
    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }
}

impl<T> Deref for Region<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        let cells = &self.inner.cells[self.range.clone()];
        // SAFETY: UnsafeCell<T> has the layout of T and the claim is exclusive.
        unsafe { std::slice::from_raw_parts(cells.as_ptr() as *const T, cells.len()) }
    }
}

impl<T> DerefMut for Region<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        let cells = &self.inner.cells[self.range.clone()];
        // SAFETY: as above; `&mut self` keeps this the only live borrow.
        unsafe { std::slice::from_raw_parts_mut(UnsafeCell::raw_get(cells.as_ptr()), cells.len()) }
    }
}

impl<T> Drop for Region<T> {
    fn drop(&mut self) {
        let mut claims = self.inner.claims.lock().unwrap();
        if let Some(i) = claims.iter().position(|c| *c == self.range) {
            claims.swap_remove(i);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlapping_claims_are_refused() {
        let slab = SharedSlab::<f32>::new(10);
        let a = slab.claim(0..5).unwrap();
        assert!(matches!(slab.claim(4..6), Err(Error::RegionBusy { .. })));
        let mut b = slab.claim(5..10).unwrap();
        b[0] = 3.0;
        drop(a);
        drop(b);
        assert_eq!(slab.to_vec().unwrap()[5], 3.0);
    }

    #[test]
    fn empty_claims_never_conflict() {
        let slab = SharedSlab::<f32>::new(4);
        let _a = slab.claim(0..4).unwrap();
        assert!(slab.claim(2..2).is_ok());
        assert!(slab.claim(0..5).is_err());
    }

    #[test]
    fn regions_move_across_threads() {
        let slab = SharedSlab::<u32>::new(8);
        let mut lo = slab.claim(0..4).unwrap();
        let mut hi = slab.claim(4..8).unwrap();
        std::thread::scope(|s| {
            s.spawn(move || lo.iter_mut().for_each(|v| *v = 1));
            s.spawn(move || hi.iter_mut().for_each(|v| *v = 2));
        });
        assert_eq!(slab.to_vec().unwrap(), vec![1, 1, 1, 1, 2, 2, 2, 2]);
    }
}
