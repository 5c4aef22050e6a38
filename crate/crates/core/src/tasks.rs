//! MNIST ingestion and the Split-MNIST task stream.
//!
//! Private training rows of a task are only reachable through
//! [`PrivateSplit::read`], which logs every read to an [`AccessMonitor`].
//! Retiring a task zeroes its private rows and poisons the handle; test
//! splits and public carve-outs stay readable.

use std::path::Path;
use std::sync::{Arc, Mutex};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nn::{Matrix, RngState};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const SPLIT_MNIST_PAIRS: [(usize, usize); 5] = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)];

/// Images scaled to `[0, 1]` (one per row) and their digit labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    images: Matrix,
    labels: Vec<usize>,
    side: usize,
}

impl RawDataset {
    pub fn new(images: Matrix, labels: Vec<usize>, side: usize) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "RawDataset",
                left: images.shape(),
                right: (labels.len(), 1),
            });
        }
        if images.cols() != side * side {
            return Err(Error::InvalidArgument(format!(
                "{} pixels per image is not a {side}x{side} square",
                images.cols()
            )));
        }
        Ok(Self { images, labels, side })
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn downscale(&self, factor: usize) -> Result<RawDataset> {
        let images = downscale(&self.images, self.side, factor)?;
        RawDataset::new(images, self.labels.clone(), self.side / factor)
    }

    /// Keeps the first `cap` rows of each digit, preserving file order.
    pub fn cap_per_class(&self, cap: usize) -> RawDataset {
        let mut seen = [0usize; 256];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = &mut seen[self.labels[i].min(255)];
                *c += 1;
                *c <= cap
            })
            .collect();
        RawDataset {
            images: self.images.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            side: self.side,
        }
    }

    pub fn to_labeled(&self) -> LabeledSet {
        LabeledSet::new(self.images.clone(), self.labels.clone()).expect("lengths checked on construction")
    }
}

fn idx_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| idx_error(path, format!("truncated header at byte {at}")))
}

/// Parses an IDX image file: magic `0x00000803`, then `n`, rows, cols, then bytes.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Matrix, usize)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(idx_error(path, format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    if rows != cols {
        return Err(idx_error(path, format!("non-square images {rows}x{cols}")));
    }
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(idx_error(path, format!("truncated: {} bytes, header promises {need}", bytes.len())));
    }
    let data = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((Matrix::from_vec(n, rows * cols, data)?, rows))
}

/// Parses an IDX label file: magic `0x00000801`, then `n`, then bytes.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(idx_error(path, format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(idx_error(path, format!("truncated: {} bytes, header promises {need}", bytes.len())));
    }
    Ok(bytes[8..need].iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawDataset> {
    let ib = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lb = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (images, side) = parse_idx_images(&ib, images_path)?;
    let labels = parse_idx_labels(&lb, labels_path)?;
    if images.rows() != labels.len() {
        return Err(idx_error(
            labels_path,
            format!("{} labels for {} images", labels.len(), images.rows()),
        ));
    }
    RawDataset::new(images, labels, side)
}

/// Loads the standard `train-*` and `t10k-*` files from `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<(RawDataset, RawDataset)> {
    let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

/// Non-overlapping `factor × factor` average pooling of square images.
pub fn downscale(images: &Matrix, side: usize, factor: usize) -> Result<Matrix> {
    if factor == 0 || side % factor != 0 {
        return Err(Error::InvalidArgument(format!("side {side} is not divisible by factor {factor}")));
    }
    if images.cols() != side * side {
        return Err(Error::InvalidArgument(format!("{} pixels is not {side}x{side}", images.cols())));
    }
    let out_side = side / factor;
    let norm = (factor * factor) as f64;
    let mut out = Matrix::zeros(images.rows(), out_side * out_side);
    for r in 0..images.rows() {
        let src = images.row(r);
        let dst = out.row_mut(r);
        for oy in 0..out_side {
            for ox in 0..out_side {
                let mut s = 0.0;
                for dy in 0..factor {
                    let row = (oy * factor + dy) * side + ox * factor;
                    s += src[row..row + factor].iter().sum::<f64>();
                }
                dst[oy * out_side + ox] = s / norm;
            }
        }
    }
    Ok(out)
}

/// One recorded read of private training rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadEvent {
    /// Task that owns the rows.
    pub owner: usize,
    /// Class filter of the read, if any.
    pub class: Option<usize>,
    /// Task whose training window was open at read time.
    pub window: Option<usize>,
}

#[derive(Debug, Default)]
struct MonitorState {
    window: Option<usize>,
    reads: Vec<ReadEvent>,
}

/// Shared log of private-data reads and the currently open training window.
#[derive(Debug, Clone, Default)]
pub struct AccessMonitor {
    state: Arc<Mutex<MonitorState>>,
}

impl AccessMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, MonitorState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn open_window(&self, task: usize) {
        self.lock().window = Some(task);
    }

    pub fn close_window(&self) {
        self.lock().window = None;
    }

    pub fn reads(&self) -> Vec<ReadEvent> {
        self.lock().reads.clone()
    }

    /// Reads that happened outside the owning task's window.
    pub fn violations(&self) -> Vec<ReadEvent> {
        self.lock()
            .reads
            .iter()
            .filter(|e| e.window != Some(e.owner))
            .copied()
            .collect()
    }

    fn record(&self, owner: usize, class: Option<usize>) {
        let mut s = self.lock();
        let window = s.window;
        s.reads.push(ReadEvent { owner, class, window });
    }
}

/// A task's private training rows behind a logged, revocable handle.
#[derive(Debug)]
pub struct PrivateSplit {
    task: usize,
    data: Option<LabeledSet>,
    monitor: AccessMonitor,
}

impl PrivateSplit {
    pub fn new(task: usize, data: LabeledSet, monitor: AccessMonitor) -> Self {
        Self {
            task,
            data: Some(data),
            monitor,
        }
    }

    pub fn read(&self) -> Result<&LabeledSet> {
        let data = self.data.as_ref().ok_or(Error::TaskRetired { task: self.task })?;
        self.monitor.record(self.task, None);
        Ok(data)
    }

    /// Only the rows labelled `class`.
    pub fn read_class(&self, class: usize) -> Result<LabeledSet> {
        let data = self.data.as_ref().ok_or(Error::TaskRetired { task: self.task })?;
        self.monitor.record(self.task, Some(class));
        Ok(data.filter_labels(|l| l == class))
    }

    pub fn len(&self) -> Result<usize> {
        self.data.as_ref().map(LabeledSet::len).ok_or(Error::TaskRetired { task: self.task })
    }

    pub fn is_retired(&self) -> bool {
        self.data.is_none()
    }

    fn retire(&mut self) -> Result<()> {
        let mut data = self.data.take().ok_or(Error::TaskRetired { task: self.task })?;
        data.zeroize();
        Ok(())
    }

    fn replace(&mut self, data: LabeledSet) {
        self.data = Some(data);
    }
}

#[derive(Debug)]
pub struct TaskDataset {
    pub id: usize,
    pub classes: Vec<usize>,
    pub train: PrivateSplit,
    pub test: LabeledSet,
    pub public: Option<LabeledSet>,
}

impl TaskDataset {
    /// Moves a stratified `fraction` of the private rows into [`Self::public`].
    pub fn carve_public(&mut self, fraction: f64, rng: &mut RngState) -> Result<()> {
        let (public, private) = carve_public(self.train.read()?, &self.classes, fraction, rng)?;
        self.train.replace(private);
        self.public = Some(public);
        Ok(())
    }
}

/// Splits the rows of `train`/`test` into one task per class group,
/// keeping original order and global labels.
pub fn split_tasks(
    train: &RawDataset,
    test: &RawDataset,
    groups: &[Vec<usize>],
    monitor: &AccessMonitor,
) -> Result<Vec<TaskDataset>> {
    let mut seen = std::collections::BTreeSet::new();
    for c in groups.iter().flatten() {
        if !seen.insert(*c) {
            return Err(Error::InvalidArgument(format!("class {c} appears in more than one task")));
        }
    }
    let (train, test) = (train.to_labeled(), test.to_labeled());
    Ok(groups
        .iter()
        .enumerate()
        .map(|(id, classes)| TaskDataset {
            id,
            classes: classes.clone(),
            train: PrivateSplit::new(id, train.filter_labels(|l| classes.contains(&l)), monitor.clone()),
            test: test.filter_labels(|l| classes.contains(&l)),
            public: None,
        })
        .collect())
}

/// Stratified sample without replacement: `floor(fraction·N)` rows split
/// evenly (rounding down) across `classes`. Returns `(public, private)`, both
/// in original row order.
pub fn carve_public(
    data: &LabeledSet,
    classes: &[usize],
    fraction: f64,
    rng: &mut RngState,
) -> Result<(LabeledSet, LabeledSet)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("public fraction must be in [0, 1), got {fraction}")));
    }
    let total = (fraction * data.len() as f64).floor() as usize;
    let per_class = if classes.is_empty() { 0 } else { total / classes.len() };
    let mut public_idx = Vec::new();
    for &c in classes {
        let mut rows: Vec<usize> = (0..data.len()).filter(|&i| data.y()[i] == c).collect();
        let k = per_class.min(rows.len());
        // partial Fisher–Yates: the first k slots become a uniform k-subset
        for i in 0..k {
            let j = i + rng.below(rows.len() - i);
            rows.swap(i, j);
        }
        public_idx.extend_from_slice(&rows[..k]);
    }
    public_idx.sort_unstable();
    let mut is_public = vec![false; data.len()];
    public_idx.iter().for_each(|&i| is_public[i] = true);
    let private_idx: Vec<usize> = (0..data.len()).filter(|&i| !is_public[i]).collect();
    Ok((data.select(&public_idx), data.select(&private_idx)))
}

/// Single-pass sequence of tasks.
#[derive(Debug)]
pub struct TaskStream {
    tasks: Vec<Option<TaskDataset>>,
    next: usize,
    monitor: AccessMonitor,
}

impl TaskStream {
    pub fn new(tasks: Vec<TaskDataset>, monitor: AccessMonitor) -> Self {
        Self {
            tasks: tasks.into_iter().map(Some).collect(),
            next: 0,
            monitor,
        }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn monitor(&self) -> &AccessMonitor {
        &self.monitor
    }

    /// Hands out task `id` and opens its training window. Each task can be taken once.
    pub fn consume_task(&mut self, id: usize) -> Result<TaskDataset> {
        let slot = self
            .tasks
            .get_mut(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no task {id}")))?;
        let task = slot.take().ok_or(Error::AlreadyConsumed { task: id })?;
        self.monitor.open_window(id);
        Ok(task)
    }

    /// Next task in order, or `None` when the stream is exhausted.
    pub fn consume(&mut self) -> Result<Option<TaskDataset>> {
        if self.next >= self.tasks.len() {
            return Ok(None);
        }
        let id = self.next;
        self.next += 1;
        self.consume_task(id).map(Some)
    }
}

/// Deletes a task's private training rows and closes its window.
pub fn retire(task: &mut TaskDataset, monitor: &AccessMonitor) -> Result<()> {
    task.train.retire()?;
    monitor.close_window();
    Ok(())
}
