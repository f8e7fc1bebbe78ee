//! MNIST ingestion and deterministic mini-batching.
//!
//! Images and labels come from IDX files (big-endian header, magic
//! `0x00000803` for images, `0x00000801` for labels). A [`BatchCursor`] walks
//! a per-epoch permutation and wraps a partial final batch into the next
//! epoch so every batch has the same size. [`Prefetcher`] runs the same
//! iteration on a producer thread behind a bounded queue.

use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::layers::DataParam;
use crate::net::{WeightEntry, WeightsFile};
use crate::tensor::Shape4;
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Decoded IDX payload: its dimensions and raw bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Idx {
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

/// Parses an unsigned-byte IDX file whose magic must be `magic`.
pub fn parse_idx(raw: &[u8], magic: u32, what: &str) -> Result<Idx> {
    if raw.len() < 4 {
        return Err(Error::Data(format!("{what}: truncated IDX header")));
    }
    let found = u32::from_be_bytes(raw[0..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(Error::Data(format!(
            "{what}: bad IDX magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if raw.len() < header {
        return Err(Error::Data(format!("{what}: truncated IDX header")));
    }
    let mut dims = Vec::with_capacity(ndims);
    let mut total: usize = 1;
    for d in 0..ndims {
        let at = 4 + 4 * d;
        let v = u32::from_be_bytes(raw[at..at + 4].try_into().expect("4 bytes")) as usize;
        total = total
            .checked_mul(v)
            .ok_or_else(|| Error::Data(format!("{what}: IDX dimensions overflow")))?;
        dims.push(v);
    }
    let payload = &raw[header..];
    if payload.len() != total {
        return Err(Error::Data(format!(
            "{what}: IDX payload has {} bytes, dimensions {dims:?} need {total}",
            payload.len()
        )));
    }
    Ok(Idx {
        dims,
        bytes: payload.to_vec(),
    })
}

pub fn read_idx(path: &Path, magic: u32) -> Result<Idx> {
    let raw = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_idx(&raw, magic, &path.display().to_string())
}

/// Images with their labels. Immutable once loaded; share it through an
/// `Arc`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: usize,
    pub cols: usize,
    /// `count * rows * cols` pixels, image-major.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(rows: usize, cols: usize, images: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() * rows * cols {
            return Err(Error::Data(format!(
                "{} labels but {} pixels of {rows}x{cols} images",
                labels.len(),
                images.len()
            )));
        }
        Ok(Dataset {
            rows,
            cols,
            images,
            labels,
        })
    }

    /// Reads an image file and a label file. Image files may have three
    /// dimensions (count, rows, cols) or four (count, 1, rows, cols).
    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        let raw = std::fs::read(images).map_err(|e| Error::io(format!("reading {}", images.display()), e))?;
        let what = images.display().to_string();
        let img = match raw.get(0..4) {
            Some([0, 0, 8, 4]) => parse_idx(&raw, 0x0000_0804, &what)?,
            _ => parse_idx(&raw, IDX_IMAGES_MAGIC, &what)?,
        };
        let (rows, cols) = match img.dims[..] {
            [_, r, c] | [_, 1, r, c] => (r, c),
            _ => return Err(Error::Data(format!("{what}: images must have one channel, got {:?}", img.dims))),
        };
        let lab = read_idx(labels, IDX_LABELS_MAGIC)?;
        if lab.dims[0] != img.dims[0] {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                img.dims[0], lab.dims[0]
            )));
        }
        Dataset::new(rows, cols, img.bytes, lab.bytes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_size();
        &self.images[i * n..(i + 1) * n]
    }

    /// One more than the largest label.
    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }
}

/// Per-pixel arithmetic mean over all images.
pub fn compute_mean(ds: &Dataset) -> Result<Vec<f32>> {
    if ds.is_empty() {
        return Err(Error::Data("cannot compute the mean of an empty dataset".into()));
    }
    let mut sum = vec![0u64; ds.image_size()];
    for i in 0..ds.len() {
        for (s, &p) in sum.iter_mut().zip(ds.image(i)) {
            *s += p as u64;
        }
    }
    Ok(sum.iter().map(|&s| (s as f64 / ds.len() as f64) as f32).collect())
}

/// Writes a mean image as a single-entry weights file.
pub fn save_mean(path: &Path, mean: &[f32], rows: usize, cols: usize) -> Result<()> {
    WeightsFile {
        entries: vec![WeightEntry {
            layer: "mean".into(),
            index: 0,
            shape: Shape4::new(1, 1, rows, cols),
            data: mean.to_vec(),
        }],
    }
    .save(path)
}

pub fn load_mean(path: &Path) -> Result<(Shape4, Vec<f32>)> {
    let w = WeightsFile::load(path)?;
    match &w.entries[..] {
        [e] => Ok((e.shape, e.data.clone())),
        _ => Err(Error::Data(format!(
            "{}: a mean file holds exactly one entry, found {}",
            path.display(),
            w.entries.len()
        ))),
    }
}

/// `x' = scale * (x - mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    pub scale: f32,
    pub mean: Option<Vec<f32>>,
}

impl Default for Transform {
    fn default() -> Self {
        Transform {
            scale: 1.0,
            mean: None,
        }
    }
}

impl Transform {
    pub fn apply(&self, pixels: &[u8], out: &mut [f32]) {
        match &self.mean {
            Some(mean) => {
                for ((o, &p), &m) in out.iter_mut().zip(pixels).zip(mean) {
                    *o = self.scale * (p as f32 - m);
                }
            }
            None => {
                for (o, &p) in out.iter_mut().zip(pixels) {
                    *o = self.scale * p as f32;
                }
            }
        }
    }
}

/// Position in the endless sequence of epoch permutations. Epoch `e` is the
/// identity when not shuffling, otherwise a Fisher-Yates shuffle driven by
/// ChaCha8 seeded with `seed` on stream `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCursor {
    batch: usize,
    seed: u64,
    shuffle: bool,
    epoch: u64,
    position: usize,
    order: Vec<u32>,
}

/// The resumable part of a cursor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CursorState {
    pub epoch: u64,
    pub position: u64,
}

impl BatchCursor {
    pub fn new(len: usize, batch: usize, shuffle: bool, seed: u64) -> Result<Self> {
        if batch == 0 || batch > len {
            return Err(Error::Data(format!("batch size {batch} does not fit a dataset of {len}")));
        }
        let len32 = u32::try_from(len).map_err(|_| Error::Data(format!("dataset of {len} items is too large")))?;
        let mut c = BatchCursor {
            batch,
            seed,
            shuffle,
            epoch: 0,
            position: 0,
            order: (0..len32).collect(),
        };
        c.permute();
        Ok(c)
    }

    fn permute(&mut self) {
        for (i, o) in self.order.iter_mut().enumerate() {
            *o = i as u32;
        }
        if self.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(self.epoch);
            self.order.shuffle(&mut rng);
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn state(&self) -> CursorState {
        CursorState {
            epoch: self.epoch,
            position: self.position as u64,
        }
    }

    pub fn restore(&mut self, state: CursorState) -> Result<()> {
        if state.position as usize >= self.order.len() {
            return Err(Error::Data(format!(
                "cursor position {} is outside a dataset of {}",
                state.position,
                self.order.len()
            )));
        }
        self.epoch = state.epoch;
        self.position = state.position as usize;
        self.permute();
        Ok(())
    }

    /// Dataset indices of the next batch.
    pub fn next_indices(&mut self, out: &mut Vec<usize>) {
        out.clear();
        while out.len() < self.batch {
            out.push(self.order[self.position] as usize);
            self.position += 1;
            if self.position == self.order.len() {
                self.epoch += 1;
                self.position = 0;
                self.permute();
            }
        }
    }
}

/// One transformed mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Vec<f32>,
    pub labels: Vec<f32>,
    /// Cursor state right after this batch was drawn.
    pub after: CursorState,
}

/// Synchronous batch producer.
#[derive(Debug, Clone)]
pub struct BatchSource {
    data: Arc<Dataset>,
    cursor: BatchCursor,
    transform: Transform,
    indices: Vec<usize>,
}

impl BatchSource {
    pub fn new(data: Arc<Dataset>, batch: usize, shuffle: bool, seed: u64, transform: Transform) -> Result<Self> {
        if let Some(mean) = &transform.mean {
            if mean.len() != data.image_size() {
                return Err(Error::Data(format!(
                    "mean image has {} pixels, images have {}",
                    mean.len(),
                    data.image_size()
                )));
            }
        }
        let cursor = BatchCursor::new(data.len(), batch, shuffle, seed)?;
        Ok(BatchSource {
            data,
            cursor,
            transform,
            indices: Vec::with_capacity(batch),
        })
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.data
    }

    pub fn cursor(&self) -> &BatchCursor {
        &self.cursor
    }

    pub fn cursor_mut(&mut self) -> &mut BatchCursor {
        &mut self.cursor
    }

    pub fn batch_shape(&self) -> Shape4 {
        Shape4::new(self.cursor.batch, 1, self.data.rows, self.data.cols)
    }

    /// Draws the next batch into caller buffers of `batch * rows * cols` and
    /// `batch` elements.
    pub fn next_into(&mut self, images: &mut [f32], labels: &mut [f32]) {
        self.cursor.next_indices(&mut self.indices);
        let n = self.data.image_size();
        for (k, &i) in self.indices.iter().enumerate() {
            self.transform.apply(self.data.image(i), &mut images[k * n..(k + 1) * n]);
            labels[k] = self.data.labels[i] as f32;
        }
    }

    pub fn next_batch(&mut self) -> Batch {
        let b = self.cursor.batch;
        let mut images = vec![0.0; b * self.data.image_size()];
        let mut labels = vec![0.0; b];
        self.next_into(&mut images, &mut labels);
        Batch {
            images,
            labels,
            after: self.cursor.state(),
        }
    }
}

/// Runs a [`BatchSource`] on a producer thread. Batches arrive in exactly
/// the synchronous order; the producer blocks once `capacity` batches are
/// waiting. Dropping the prefetcher stops and joins the producer.
pub struct Prefetcher {
    rx: Option<Receiver<Batch>>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(mut source: BatchSource, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Data("prefetch capacity must be at least 1".into()));
        }
        let (tx, rx) = sync_channel(capacity);
        let handle = std::thread::Builder::new()
            .name("prefetch".into())
            .spawn(move || {
                while tx.send(source.next_batch()).is_ok() {}
            })
            .map_err(|e| Error::io("starting the prefetch thread", e))?;
        Ok(Prefetcher {
            rx: Some(rx),
            handle: Some(handle),
        })
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        self.rx
            .as_ref()
            .and_then(|rx| rx.recv().ok())
            .ok_or_else(|| Error::Data("the prefetch thread stopped".into()))
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // Closing the channel makes the producer's next send fail.
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Which data set of a data layer to open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

/// Opens the source a data layer names. Relative paths are resolved against
/// `base`. Training sources shuffle when the layer says so; test sources
/// never do.
pub fn open_source(param: &DataParam, base: &Path, phase: Phase, seed: u64) -> Result<BatchSource> {
    let (images, labels, batch) = match phase {
        Phase::Train => (param.source.as_str(), param.label_source.as_str(), param.batch_size),
        Phase::Test => match (&param.test_source, &param.test_label_source) {
            (Some(i), Some(l)) => (i.as_str(), l.as_str(), param.test_batch_size),
            _ => return Err(Error::Data("data layer has no test_source/test_label_source".into())),
        },
    };
    let data = Dataset::load(&base.join(images), &base.join(labels))?;
    if (param.channels, param.height, param.width) != (1, data.rows, data.cols) {
        return Err(Error::Data(format!(
            "data layer expects {}x{}x{} images, {images} holds 1x{}x{}",
            param.channels, param.height, param.width, data.rows, data.cols
        )));
    }
    let mean = match &param.mean_file {
        Some(m) => {
            let (shape, mean) = load_mean(&base.join(m))?;
            if shape.count() != data.image_size() {
                return Err(Error::Data(format!("mean image {shape} does not match {}x{} images", data.rows, data.cols)));
            }
            Some(mean)
        }
        None => None,
    };
    let transform = Transform {
        scale: param.scale as f32,
        mean,
    };
    BatchSource::new(Arc::new(data), batch, param.shuffle && phase == Phase::Train, seed, transform)
}
