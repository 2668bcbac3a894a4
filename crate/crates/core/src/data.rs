//! Federated dataset generation and ingestion with controlled
//! heterogeneity: label-shift Gaussian blobs, rotated+masked images, and
//! IDX file parsing.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, RngExt};

use crate::error::{Error, Result};
use crate::model::ClientId;
use crate::rng::standard_normal;

/// Rotation angles supported by the covariate-shift transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rotation {
    Deg0,
    Deg90,
    Deg180,
    Deg270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [
        Rotation::Deg0,
        Rotation::Deg90,
        Rotation::Deg180,
        Rotation::Deg270,
    ];

    pub fn degrees(self) -> u16 {
        match self {
            Rotation::Deg0 => 0,
            Rotation::Deg90 => 90,
            Rotation::Deg180 => 180,
            Rotation::Deg270 => 270,
        }
    }

    fn quarter_turns(self) -> usize {
        (self.degrees() / 90) as usize
    }
}

/// Per-client covariate-shift descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformDesc {
    pub rotation: Rotation,
    /// Top-left corner of the zeroed 2x2 block, applied after rotation.
    pub mask_pos: (usize, usize),
}

/// One client's train/test split plus its class set and transform.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub train_inputs: Array2<f64>,
    pub train_labels: Vec<usize>,
    pub test_inputs: Array2<f64>,
    pub test_labels: Vec<usize>,
    pub classes: BTreeSet<usize>,
    pub transform: Option<TransformDesc>,
}

impl ClientData {
    pub fn train_len(&self) -> usize {
        self.train_labels.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_labels.len()
    }
}

/// A federated dataset: per-client splits over a shared input space.
#[derive(Debug, Clone)]
pub struct FederatedDataset {
    pub clients: Vec<ClientData>,
    pub c_total: usize,
    pub input_dim: usize,
}

impl FederatedDataset {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }
}

/// Parameters for the label-shift blob generator.
#[derive(Debug, Clone, Copy)]
pub struct BlobSpec {
    pub num_clients: usize,
    pub classes_per_client: usize,
    pub samples_per_client: usize,
    pub input_dim: usize,
    pub c_total: usize,
    /// Distance of each class mean from the origin (unit covariance noise).
    pub separation: f64,
}

impl BlobSpec {
    fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be >= 1".into()));
        }
        if self.c_total == 0 {
            return Err(Error::Config("c_total must be >= 1".into()));
        }
        if self.classes_per_client == 0 || self.classes_per_client > self.c_total {
            return Err(Error::Config(format!(
                "classes_per_client {} must be in [1, {}]",
                self.classes_per_client, self.c_total
            )));
        }
        if self.input_dim < self.c_total {
            return Err(Error::Config(format!(
                "input_dim {} must be >= c_total {} so class means can be orthogonal",
                self.input_dim, self.c_total
            )));
        }
        if self.samples_per_client < 2 * self.classes_per_client {
            return Err(Error::Config(format!(
                "samples_per_client {} too small for {} classes (need train and test per class)",
                self.samples_per_client, self.classes_per_client
            )));
        }
        if !(self.separation > 0.0) {
            return Err(Error::Config("separation must be > 0".into()));
        }
        Ok(())
    }
}

/// Random orthonormal directions via Gram-Schmidt on Gaussian draws.
fn orthonormal_means<R: Rng>(dim: usize, count: usize, rng: &mut R) -> Vec<Array1<f64>> {
    let mut means: Vec<Array1<f64>> = Vec::with_capacity(count);
    while means.len() < count {
        let mut v = Array1::from_shape_fn(dim, |_| standard_normal(rng));
        for u in &means {
            let proj = v.dot(u);
            v.scaled_add(-proj, u);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            means.push(v / norm);
        }
    }
    means
}

/// Stratified 80/20 split keeping at least one test sample per class.
fn split_client(
    inputs: Array2<f64>,
    labels: Vec<usize>,
    classes: BTreeSet<usize>,
    transform: Option<TransformDesc>,
) -> ClientData {
    let dim = inputs.ncols();
    let mut train_rows: Vec<usize> = Vec::new();
    let mut test_rows: Vec<usize> = Vec::new();
    for &class in &classes {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let mut n_train = (rows.len() as f64 * 0.8).floor() as usize;
        if n_train == rows.len() {
            n_train -= 1;
        }
        if n_train == 0 && rows.len() > 1 {
            n_train = 1;
        }
        train_rows.extend(&rows[..n_train]);
        test_rows.extend(&rows[n_train..]);
    }
    train_rows.sort_unstable();
    test_rows.sort_unstable();

    let gather = |rows: &[usize]| -> (Array2<f64>, Vec<usize>) {
        let mut out = Array2::zeros((rows.len(), dim));
        let mut out_labels = Vec::with_capacity(rows.len());
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(r).assign(&inputs.row(i));
            out_labels.push(labels[i]);
        }
        (out, out_labels)
    };
    let (train_inputs, train_labels) = gather(&train_rows);
    let (test_inputs, test_labels) = gather(&test_rows);
    ClientData {
        train_inputs,
        train_labels,
        test_inputs,
        test_labels,
        classes,
        transform,
    }
}

/// Label-shift benchmark: `c_total` unit-covariance Gaussian blobs with
/// orthogonal means at the given separation; each client draws only from
/// its `classes_per_client` classes, assigned round-robin over a shuffled
/// class list so every class is covered.
pub fn gen_label_shift<R: Rng>(spec: &BlobSpec, rng: &mut R) -> Result<FederatedDataset> {
    spec.validate()?;
    let means: Vec<Array1<f64>> = orthonormal_means(spec.input_dim, spec.c_total, rng)
        .into_iter()
        .map(|v| v * spec.separation)
        .collect();

    let mut class_list: Vec<usize> = (0..spec.c_total).collect();
    class_list.shuffle(rng);

    let mut clients = Vec::with_capacity(spec.num_clients);
    for k in 0..spec.num_clients {
        let classes: BTreeSet<usize> = (0..spec.classes_per_client)
            .map(|j| class_list[(k * spec.classes_per_client + j) % spec.c_total])
            .collect();
        let owned: Vec<usize> = classes.iter().copied().collect();
        let mut inputs = Array2::zeros((spec.samples_per_client, spec.input_dim));
        let mut labels = Vec::with_capacity(spec.samples_per_client);
        for i in 0..spec.samples_per_client {
            let class = owned[i % owned.len()];
            let mean = &means[class];
            for d in 0..spec.input_dim {
                inputs[[i, d]] = mean[d] + standard_normal(rng);
            }
            labels.push(class);
        }
        clients.push(split_client(inputs, labels, classes, None));
    }
    Ok(FederatedDataset {
        clients,
        c_total: spec.c_total,
        input_dim: spec.input_dim,
    })
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "{what}: file truncated at offset {offset} (need 4 bytes, have {})",
            bytes.len().saturating_sub(offset)
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parse an IDX image/label file pair bit-exactly: big-endian magic and
/// dimension words, unsigned-byte payload; pixels scaled to [0, 1].
///
/// Returns (images flattened to rows, labels, (rows, cols)).
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
) -> Result<(Array2<f64>, Vec<usize>, (usize, usize))> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;

    let magic = read_u32_be(&image_bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images: magic 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let n_images = read_u32_be(&image_bytes, 4, "images")? as usize;
    let rows = read_u32_be(&image_bytes, 8, "images")? as usize;
    let cols = read_u32_be(&image_bytes, 12, "images")? as usize;
    let expected = 16 + n_images * rows * cols;
    if image_bytes.len() != expected {
        return Err(Error::Format(format!(
            "images: {} bytes, expected {expected} (truncated at offset {})",
            image_bytes.len(),
            image_bytes.len().min(expected)
        )));
    }

    let magic = read_u32_be(&label_bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels: magic 0x{magic:08x} at offset 0, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let n_labels = read_u32_be(&label_bytes, 4, "labels")? as usize;
    if label_bytes.len() != 8 + n_labels {
        return Err(Error::Format(format!(
            "labels: {} bytes, expected {} (truncated at offset {})",
            label_bytes.len(),
            8 + n_labels,
            label_bytes.len().min(8 + n_labels)
        )));
    }
    if n_images != n_labels {
        return Err(Error::Format(format!(
            "count mismatch: {n_images} images vs {n_labels} labels"
        )));
    }

    let mut images = Array2::zeros((n_images, rows * cols));
    for i in 0..n_images {
        let base = 16 + i * rows * cols;
        for p in 0..rows * cols {
            images[[i, p]] = image_bytes[base + p] as f64 / 255.0;
        }
    }
    let labels: Vec<usize> = label_bytes[8..].iter().map(|&b| b as usize).collect();
    Ok((images, labels, (rows, cols)))
}

/// Exact 90-degree-multiple rotation (clockwise index remap), then zero the
/// 2x2 block whose top-left corner is `mask_pos`.
pub fn rotate_mask(
    image: &Array2<f64>,
    rotation: Rotation,
    mask_pos: (usize, usize),
) -> Result<Array2<f64>> {
    let mut out = image.clone();
    for _ in 0..rotation.quarter_turns() {
        let (h, w) = out.dim();
        let mut next = Array2::zeros((w, h));
        for i in 0..w {
            for j in 0..h {
                next[[i, j]] = out[[h - 1 - j, i]];
            }
        }
        out = next;
    }
    let (h, w) = out.dim();
    let (r, c) = mask_pos;
    if r + 2 > h || c + 2 > w {
        return Err(Error::Input(format!(
            "2x2 mask at ({r},{c}) out of bounds for {h}x{w} image"
        )));
    }
    for dr in 0..2 {
        for dc in 0..2 {
            out[[r + dr, c + dc]] = 0.0;
        }
    }
    Ok(out)
}

/// Split flattened images into K clients with covariate shift only: clients
/// are spread over the four rotation groups (client index mod 4; any
/// remainder makes some groups one client larger), every client sees all
/// classes through a stratified disjoint shard, and each client gets a
/// seeded mask position applied after rotation.
pub fn partition_rotated_masked<R: Rng>(
    images: &Array2<f64>,
    labels: &[usize],
    image_dims: (usize, usize),
    num_clients: usize,
    rng: &mut R,
) -> Result<FederatedDataset> {
    let (h, w) = image_dims;
    if h * w != images.ncols() {
        return Err(Error::Config(format!(
            "image dims {h}x{w} do not match {} columns",
            images.ncols()
        )));
    }
    if images.nrows() != labels.len() {
        return Err(Error::Config(format!(
            "{} images but {} labels",
            images.nrows(),
            labels.len()
        )));
    }
    if num_clients == 0 {
        return Err(Error::Config("num_clients must be >= 1".into()));
    }
    let c_total = labels.iter().copied().max().map_or(0, |m| m + 1);
    if images.nrows() < num_clients * 2 * c_total {
        return Err(Error::Config(format!(
            "{} samples are too few for {num_clients} clients over {c_total} classes",
            images.nrows()
        )));
    }

    // Deal each class's (shuffled) samples round-robin so shards are
    // disjoint and every client sees every class.
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for class in 0..c_total {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rows.shuffle(rng);
        for (pos, row) in rows.into_iter().enumerate() {
            shards[pos % num_clients].push(row);
        }
    }

    let mut clients = Vec::with_capacity(num_clients);
    for (k, shard) in shards.iter().enumerate() {
        let rotation = Rotation::ALL[k % 4];
        let (out_h, out_w) = match rotation {
            Rotation::Deg90 | Rotation::Deg270 => (w, h),
            _ => (h, w),
        };
        let mask_pos = (
            rng.random_range(0..=out_h - 2),
            rng.random_range(0..=out_w - 2),
        );
        let transform = TransformDesc { rotation, mask_pos };

        let mut inputs = Array2::zeros((shard.len(), out_h * out_w));
        let mut shard_labels = Vec::with_capacity(shard.len());
        for (r, &row) in shard.iter().enumerate() {
            let img = Array2::from_shape_vec((h, w), images.row(row).to_vec())
                .expect("row length checked above");
            let transformed = rotate_mask(&img, rotation, mask_pos)?;
            for (p, v) in transformed.iter().enumerate() {
                inputs[[r, p]] = *v;
            }
            shard_labels.push(labels[row]);
        }
        let classes: BTreeSet<usize> = shard_labels.iter().copied().collect();
        clients.push(split_client(inputs, shard_labels, classes, Some(transform)));
    }
    Ok(FederatedDataset {
        clients,
        c_total,
        input_dim: h * w,
    })
}

/// Nearest-class-mean accuracy per client; an independent reference for how
/// separable the generated blobs are.
pub fn nearest_mean_accuracy(dataset: &FederatedDataset) -> Vec<f64> {
    dataset
        .clients
        .iter()
        .map(|client| {
            let mut sums: Vec<(Array1<f64>, usize)> =
                vec![(Array1::zeros(dataset.input_dim), 0); dataset.c_total];
            for (row, &label) in client
                .train_inputs
                .rows()
                .into_iter()
                .zip(&client.train_labels)
            {
                sums[label].0 += &row;
                sums[label].1 += 1;
            }
            let means: Vec<Option<Array1<f64>>> = sums
                .into_iter()
                .map(|(s, n)| if n > 0 { Some(s / n as f64) } else { None })
                .collect();
            let mut correct = 0usize;
            for (row, &label) in client
                .test_inputs
                .rows()
                .into_iter()
                .zip(&client.test_labels)
            {
                let mut best = (f64::INFINITY, 0usize);
                for (c, mean) in means.iter().enumerate() {
                    if let Some(mean) = mean {
                        let d2 = row
                            .iter()
                            .zip(mean.iter())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>();
                        if d2 < best.0 {
                            best = (d2, c);
                        }
                    }
                }
                if best.1 == label {
                    correct += 1;
                }
            }
            correct as f64 / client.test_len().max(1) as f64
        })
        .collect()
}

/// Export a dataset as a CSV bundle plus a JSON manifest recording the
/// seed, per-client class sets, and transforms.
pub fn export_dataset(dataset: &FederatedDataset, seed: u64, dir: &Path) -> Result<()> {
    use std::io::Write;

    fs::create_dir_all(dir)?;
    let manifest = serde_json::json!({
        "seed": seed,
        "num_clients": dataset.num_clients(),
        "c_total": dataset.c_total,
        "input_dim": dataset.input_dim,
        "clients": dataset
            .clients
            .iter()
            .enumerate()
            .map(|(k, c)| {
                serde_json::json!({
                    "client": k,
                    "classes": c.classes.iter().collect::<Vec<_>>(),
                    "train_samples": c.train_len(),
                    "test_samples": c.test_len(),
                    "rotation_deg": c.transform.map(|t| t.rotation.degrees()),
                    "mask_row": c.transform.map(|t| t.mask_pos.0),
                    "mask_col": c.transform.map(|t| t.mask_pos.1),
                })
            })
            .collect::<Vec<_>>(),
    });
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    for (name, pick) in [("train.csv", true), ("test.csv", false)] {
        let mut out = Vec::new();
        write!(out, "client,label")?;
        for d in 0..dataset.input_dim {
            write!(out, ",x{d}")?;
        }
        writeln!(out)?;
        for (k, client) in dataset.clients.iter().enumerate() {
            let (inputs, labels) = if pick {
                (&client.train_inputs, &client.train_labels)
            } else {
                (&client.test_inputs, &client.test_labels)
            };
            for (row, &label) in inputs.rows().into_iter().zip(labels) {
                write!(out, "{k},{label}")?;
                for v in row.iter() {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        fs::write(dir.join(name), out)?;
    }
    Ok(())
}

/// Planted label-shift grouping: clients sharing an identical class set
/// belong to the same ground-truth group.
pub fn planted_groups(dataset: &FederatedDataset) -> Vec<Vec<ClientId>> {
    let mut groups: Vec<(BTreeSet<usize>, Vec<ClientId>)> = Vec::new();
    for (k, client) in dataset.clients.iter().enumerate() {
        if let Some(entry) = groups.iter_mut().find(|(set, _)| *set == client.classes) {
            entry.1.push(k);
        } else {
            groups.push((client.classes.clone(), vec![k]));
        }
    }
    groups.into_iter().map(|(_, members)| members).collect()
}
