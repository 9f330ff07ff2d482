use rand::Rng;
use rand_distr::StandardNormal;

use crate::encoder::FeatureVector;
use crate::error::{Error, Result};
use crate::real::Real;

const UNIT_TOL: f64 = 1e-5;

/// Fixed-capacity FIFO of K unit-norm key vectors (the negatives).
///
/// Storage is a ring buffer; `head` points at the oldest column.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueMatrix<T> {
    dim: usize,
    capacity: usize,
    data: Vec<T>,
    head: usize,
}

impl<T: Real> QueueMatrix<T> {
    /// K Gaussian vectors scaled to unit norm.
    pub fn random<R: Rng + ?Sized>(capacity: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::InvalidConfig("queue capacity and dim must be positive".into()));
        }
        let mut data = Vec::with_capacity(capacity * dim);
        for _ in 0..capacity {
            loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-6 {
                    data.extend(v.iter().map(|x| T::of(x / n)));
                    break;
                }
            }
        }
        Ok(Self {
            dim,
            capacity,
            data,
            head: 0,
        })
    }

    /// Builds a queue from columns given oldest-first.
    pub fn from_columns(columns: &[FeatureVector<T>]) -> Result<Self> {
        let dim = columns.first().map(|c| c.dim()).ok_or(Error::InvalidConfig(
            "queue needs at least one column".into(),
        ))?;
        let mut data = Vec::with_capacity(columns.len() * dim);
        for c in columns {
            check_key(c, dim)?;
            data.extend_from_slice(c.values());
        }
        Ok(Self {
            dim,
            capacity: columns.len(),
            data,
            head: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The `i`-th oldest column.
    pub fn column(&self, i: usize) -> &[T] {
        let slot = (self.head + i) % self.capacity;
        &self.data[slot * self.dim..(slot + 1) * self.dim]
    }

    /// Columns oldest-first.
    pub fn columns(&self) -> impl Iterator<Item = &[T]> + '_ {
        (0..self.capacity).map(move |i| self.column(i))
    }

    /// Drops the `keys.len()` oldest columns and appends `keys` in order.
    pub fn enqueue_dequeue(&mut self, keys: &[FeatureVector<T>]) -> Result<()> {
        if keys.len() > self.capacity {
            return Err(Error::BatchExceedsQueue {
                batch: keys.len(),
                capacity: self.capacity,
            });
        }
        for k in keys {
            check_key(k, self.dim)?;
        }
        for k in keys {
            let slot = self.head;
            self.data[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(k.values());
            self.head = (self.head + 1) % self.capacity;
        }
        Ok(())
    }
}

fn check_key<T: Real>(k: &FeatureVector<T>, dim: usize) -> Result<()> {
    if k.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: k.dim(),
        });
    }
    if !k.is_unit(UNIT_TOL) {
        return Err(Error::NotUnitNorm(k.norm()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(dim: usize, i: usize) -> FeatureVector<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        FeatureVector(v)
    }

    #[test]
    fn fifo_example() {
        let [a, b, c, d, e, f] = std::array::from_fn(|i| basis(6, i));
        let mut q = QueueMatrix::from_columns(&[a, b, c.clone(), d.clone()]).unwrap();
        q.enqueue_dequeue(&[e.clone(), f.clone()]).unwrap();
        let cols: Vec<&[f64]> = q.columns().collect();
        assert_eq!(cols, vec![c.values(), d.values(), e.values(), f.values()]);
    }

    #[test]
    fn full_replacement_and_overflow() {
        let mut q = QueueMatrix::from_columns(&[basis(3, 0), basis(3, 1)]).unwrap();
        let fresh = [basis(3, 2), basis(3, 1)];
        q.enqueue_dequeue(&fresh).unwrap();
        assert_eq!(q.column(0), fresh[0].values());
        assert_eq!(q.column(1), fresh[1].values());
        assert!(matches!(
            q.enqueue_dequeue(&[basis(3, 0), basis(3, 1), basis(3, 2)]),
            Err(Error::BatchExceedsQueue { batch: 3, capacity: 2 })
        ));
    }

    #[test]
    fn rejects_bad_keys() {
        let mut q = QueueMatrix::from_columns(&[basis(3, 0), basis(3, 1)]).unwrap();
        assert!(matches!(q.enqueue_dequeue(&[basis(4, 0)]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(
            q.enqueue_dequeue(&[FeatureVector(vec![2.0, 0.0, 0.0])]),
            Err(Error::NotUnitNorm(_))
        ));
        // the failed calls left the queue untouched
        assert_eq!(q.column(0), basis(3, 0).values());
    }

    #[test]
    fn random_columns_are_unit() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let q = QueueMatrix::<f32>::random(16, 8, &mut rng).unwrap();
        assert_eq!(q.columns().count(), 16);
        for c in q.columns() {
            let n: f64 = c.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }
}
