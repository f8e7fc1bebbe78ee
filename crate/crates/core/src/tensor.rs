//! Blobs: the 4-D containers every layer reads and writes.
//!
//! A blob pairs a `data` plane with a `diff` (gradient) plane of the same
//! length, laid out row-major in N, C, H, W order. Planes are materialized
//! lazily: nothing is allocated until a plane is written or read. Reading an
//! unmaterialized plane materializes it as zeros.

use std::cell::Cell;
use std::fmt;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Real, Result};

thread_local! {
    static ALLOCATIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of plane and scratch-buffer allocations made on the current thread.
///
/// Tests use this to observe lazy materialization and to check that a built
/// net runs forward and backward without allocating.
pub fn allocation_count() -> usize {
    ALLOCATIONS.with(|c| c.get())
}

/// Allocates a zeroed buffer and records it in [`allocation_count`].
pub(crate) fn alloc_zeroed<T: Real>(len: usize) -> Vec<T> {
    ALLOCATIONS.with(|c| c.set(c.get() + 1));
    vec![T::zero(); len]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape4 {
    pub num: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub const fn new(num: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape4 {
            num,
            channels,
            height,
            width,
        }
    }

    pub fn checked_count(&self) -> Option<usize> {
        self.num
            .checked_mul(self.channels)?
            .checked_mul(self.height)?
            .checked_mul(self.width)
    }

    /// Element count. Only meaningful for shapes that passed [`Blob::new`]
    /// validation; saturates instead of wrapping otherwise.
    pub fn count(&self) -> usize {
        self.checked_count().unwrap_or(usize::MAX)
    }

    /// Elements per item: `channels * height * width`.
    pub fn item_count(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.num, self.channels, self.height, self.width]
    }

    pub fn is_empty(&self) -> bool {
        self.dims().contains(&0)
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.num && c < self.channels && h < self.height && w < self.width);
        ((n * self.channels + c) * self.height + h) * self.width + w
    }

    /// Inverse of [`Shape4::offset`].
    pub fn decode(&self, index: usize) -> (usize, usize, usize, usize) {
        let w = index % self.width;
        let rest = index / self.width;
        let h = rest % self.height;
        let rest = rest / self.height;
        let c = rest % self.channels;
        (rest / self.channels, c, h, w)
    }
}

impl From<[usize; 4]> for Shape4 {
    fn from(d: [usize; 4]) -> Self {
        Shape4::new(d[0], d[1], d[2], d[3])
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.num, self.channels, self.height, self.width)
    }
}

fn validate_shape<T>(shape: Shape4) -> Result<usize> {
    let count = shape
        .checked_count()
        .ok_or_else(|| Error::Alloc(format!("shape {shape} overflows the addressable count")))?;
    if count > isize::MAX as usize / std::mem::size_of::<T>().max(1) {
        return Err(Error::Alloc(format!("shape {shape} exceeds addressable memory")));
    }
    Ok(count)
}

/// Which plane of a blob an operation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plane {
    Data,
    Diff,
}

/// Lazily materialized storage. The vector length is the capacity; the
/// visible plane is its first `count` elements.
struct Storage<T>(OnceLock<Vec<T>>);

impl<T: Real> Storage<T> {
    fn empty() -> Self {
        Storage(OnceLock::new())
    }

    fn is_materialized(&self) -> bool {
        self.0.get().is_some()
    }

    fn get(&self, count: usize) -> &[T] {
        &self.0.get_or_init(|| alloc_zeroed(count))[..count]
    }

    fn get_mut(&mut self, count: usize) -> &mut [T] {
        if self.0.get().is_none() {
            let _ = self.0.set(alloc_zeroed(count));
        }
        &mut self.0.get_mut().expect("materialized above")[..count]
    }

    fn capacity(&self) -> usize {
        self.0.get().map_or(0, Vec::len)
    }

    fn grow(&mut self, count: usize) {
        if let Some(v) = self.0.get_mut() {
            if v.len() < count {
                *v = alloc_zeroed(count);
            }
        }
    }
}

impl<T: Real> Clone for Storage<T> {
    fn clone(&self) -> Self {
        let lock = OnceLock::new();
        if let Some(v) = self.0.get() {
            let _ = lock.set(v.clone());
        }
        Storage(lock)
    }
}

pub struct Blob<T: Real = f32> {
    shape: Shape4,
    data: Storage<T>,
    diff: Storage<T>,
}

impl<T: Real> Blob<T> {
    /// Creates a blob with both planes unmaterialized.
    pub fn new(shape: Shape4) -> Result<Self> {
        validate_shape::<T>(shape)?;
        Ok(Blob {
            shape,
            data: Storage::empty(),
            diff: Storage::empty(),
        })
    }

    /// Creates a blob whose data plane holds `values`.
    pub fn from_data(shape: Shape4, values: &[T]) -> Result<Self> {
        let mut b = Blob::new(shape)?;
        b.set_data(values)?;
        Ok(b)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn count(&self) -> usize {
        self.shape.count()
    }

    /// Largest element count either plane can hold without reallocating.
    pub fn capacity(&self) -> usize {
        self.data.capacity().max(self.diff.capacity())
    }

    pub fn is_data_materialized(&self) -> bool {
        self.data.is_materialized()
    }

    pub fn is_diff_materialized(&self) -> bool {
        self.diff.is_materialized()
    }

    /// Replaces the shape. Materialized planes are reallocated only when the
    /// new count exceeds their capacity; an unchanged count keeps contents.
    pub fn reshape(&mut self, shape: Shape4) -> Result<()> {
        let count = validate_shape::<T>(shape)?;
        self.data.grow(count);
        self.diff.grow(count);
        self.shape = shape;
        Ok(())
    }

    pub fn data(&self) -> &[T] {
        self.data.get(self.count())
    }

    pub fn diff(&self) -> &[T] {
        self.diff.get(self.count())
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        let n = self.count();
        self.data.get_mut(n)
    }

    pub fn diff_mut(&mut self) -> &mut [T] {
        let n = self.count();
        self.diff.get_mut(n)
    }

    /// Borrows the data plane for reading and the diff plane for writing.
    pub fn data_and_diff_mut(&mut self) -> (&[T], &mut [T]) {
        let n = self.count();
        self.data.get_mut(n);
        self.diff.get_mut(n);
        (self.data.get(n), self.diff.get_mut(n))
    }

    /// Borrows the data plane for writing and the diff plane for reading.
    pub fn data_mut_and_diff(&mut self) -> (&mut [T], &[T]) {
        let n = self.count();
        self.diff.get_mut(n);
        (self.data.get_mut(n), self.diff.get(n))
    }

    /// Materializes both planes.
    pub fn materialize(&mut self) {
        let _ = self.data_and_diff_mut();
    }

    pub fn plane(&self, plane: Plane) -> &[T] {
        match plane {
            Plane::Data => self.data(),
            Plane::Diff => self.diff(),
        }
    }

    pub fn plane_mut(&mut self, plane: Plane) -> &mut [T] {
        match plane {
            Plane::Data => self.data_mut(),
            Plane::Diff => self.diff_mut(),
        }
    }

    pub fn set_data(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.count() {
            return Err(Error::Shape(format!(
                "cannot set {} values into blob of shape {}",
                values.len(),
                self.shape
            )));
        }
        self.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Zeroes the diff plane. Leaves an unmaterialized plane alone, since it
    /// already reads as zeros.
    pub fn zero_diff(&mut self) {
        if self.diff.is_materialized() {
            self.diff_mut().fill(T::zero());
        }
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data()[self.shape.offset(n, c, h, w)]
    }

    /// Copies this blob's data plane into a blob of another precision.
    pub fn convert<U: Real>(&self) -> Blob<U> {
        let mut out = Blob::<U>::new(self.shape).expect("shape validated for a wider type");
        if self.data.is_materialized() {
            for (o, &v) in out.data_mut().iter_mut().zip(self.data()) {
                *o = U::from_f64(v.to_f64());
            }
        }
        out
    }
}

impl<T: Real> Clone for Blob<T> {
    fn clone(&self) -> Self {
        Blob {
            shape: self.shape,
            data: self.data.clone(),
            diff: self.diff.clone(),
        }
    }
}

impl<T: Real> Default for Blob<T> {
    fn default() -> Self {
        Blob {
            shape: Shape4::default(),
            data: Storage::empty(),
            diff: Storage::empty(),
        }
    }
}

impl<T: Real> fmt::Debug for Blob<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Blob")
            .field("shape", &self.shape)
            .field("data_materialized", &self.is_data_materialized())
            .field("diff_materialized", &self.is_diff_materialized())
            .finish()
    }
}

/// `y.plane <- alpha * x.plane + beta * y.plane`, elementwise.
pub fn axpby<T: Real>(alpha: T, x: &Blob<T>, beta: T, y: &mut Blob<T>, plane: Plane) -> Result<()> {
    if x.count() != y.count() {
        return Err(Error::Shape(format!(
            "axpby count mismatch: {} vs {}",
            x.shape(),
            y.shape()
        )));
    }
    let xs = x.plane(plane);
    for (yv, &xv) in y.plane_mut(plane).iter_mut().zip(xs) {
        *yv = alpha * xv + beta * *yv;
    }
    Ok(())
}

/// Parameter initialization strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Filler {
    Constant { value: f64 },
    Uniform { min: f64, max: f64 },
    Gaussian { mean: f64, std: f64 },
    /// Uniform in `[-sqrt(3 / fan_in), sqrt(3 / fan_in)]` where
    /// `fan_in = count / num` of the filled blob.
    Xavier,
}

impl Filler {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Filler::Uniform { min, max } if !(min <= max) => Err(Error::Config(format!(
                "uniform filler needs min <= max, got min={min} max={max}"
            ))),
            Filler::Gaussian { std, .. } if !(std >= 0.0) => Err(Error::Config(format!(
                "gaussian filler needs std >= 0, got {std}"
            ))),
            _ => Ok(()),
        }
    }

    /// Fills the data plane. Identical seed, filler and shape give
    /// bit-identical contents. The generator is ChaCha8 seeded through
    /// `seed_from_u64`; samples are drawn in `f64` and rounded.
    pub fn fill<T: Real>(&self, blob: &mut Blob<T>, seed: u64) -> Result<()> {
        self.validate()?;
        let shape = blob.shape();
        if blob.count() == 0 {
            return Err(Error::Shape(format!("cannot fill empty blob {shape}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = blob.data_mut();
        match *self {
            Filler::Constant { value } => data.fill(T::from_f64(value)),
            Filler::Uniform { min, max } => uniform(data, min, max, &mut rng),
            Filler::Gaussian { mean, std } => {
                let normal = Normal::new(mean, std)
                    .map_err(|e| Error::Config(format!("gaussian filler: {e}")))?;
                for v in data.iter_mut() {
                    *v = T::from_f64(normal.sample(&mut rng));
                }
            }
            Filler::Xavier => {
                let fan_in = shape.item_count() as f64;
                let bound = (3.0 / fan_in).sqrt();
                uniform(data, -bound, bound, &mut rng);
            }
        }
        Ok(())
    }
}

fn uniform<T: Real>(data: &mut [T], min: f64, max: f64, rng: &mut ChaCha8Rng) {
    for v in data.iter_mut() {
        let u: f64 = rng.random();
        // Clamp guards against `min + (max - min) * u` rounding past `max`.
        *v = T::from_f64((min + (max - min) * u).clamp(min, max));
    }
}
