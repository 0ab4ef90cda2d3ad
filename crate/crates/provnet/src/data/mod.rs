//! Dataset ingestion and index bookkeeping: IDX container parsing,
//! normalization, stratified subsetting, the global↔local index maps,
//! and the α mixing sampler.

pub mod distort;
pub mod synthetic;

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images + labels + immutable sample indices. Pixel values live in
/// [0,1] until [`IndexedDataset::normalize`] is applied; the stored
/// order defines the global indices for all time.
#[derive(Debug, Clone)]
pub struct IndexedDataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Always 0..N−1 for this dataset's own indexing.
    pub global_index: Vec<usize>,
    pub num_classes: usize,
    pub class_counts: Vec<usize>,
    /// Per class, the ordered list of global indices.
    pub per_class_lists: Vec<Vec<usize>>,
    /// For subsets: this dataset's index → the original dataset's index.
    pub source_index: Option<Vec<usize>>,
    /// (μ, σ) if normalize() has been applied.
    pub norm: Option<(f32, f32)>,
    /// Content hash: identifies the exact sample ordering indices refer to.
    pub fingerprint: String,
}

impl IndexedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.images.dim(2), self.images.dim(3))
    }

    /// Row view of one image.
    pub fn image(&self, i: usize) -> &[f32] {
        let px = self.images.dim(1) * self.images.dim(2) * self.images.dim(3);
        &self.images.data()[i * px..(i + 1) * px]
    }

    /// Assemble a [B,1,H,W] batch for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let (c, h, w) = (self.images.dim(1), self.images.dim(2), self.images.dim(3));
        let px = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * px);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::from_vec(&[indices.len(), c, h, w], data)
    }

    /// x ← (x − μ)/σ elementwise.
    pub fn normalize(&self, mu: f32, sigma: f32) -> Result<IndexedDataset> {
        if sigma <= 0.0 {
            return Err(Error::Param(format!("normalize: σ must be > 0, got {sigma}")));
        }
        let mut out = self.clone();
        out.images = self.images.map(|v| (v - mu) / sigma);
        out.norm = Some((mu, sigma));
        Ok(out)
    }

    /// Inverse of [`normalize`].
    pub fn denormalize(&self) -> IndexedDataset {
        let mut out = self.clone();
        if let Some((mu, sigma)) = self.norm {
            out.images = self.images.map(|v| v * sigma + mu);
            out.norm = None;
        }
        out
    }

    /// Map this dataset's index to the root dataset's global index.
    pub fn to_source_index(&self, i: usize) -> usize {
        match &self.source_index {
            Some(map) => map[i],
            None => i,
        }
    }

    /// Per class, keep floor(ratio·K_y) samples chosen uniformly without
    /// replacement; kept samples are re-indexed 0..N'−1 in original
    /// order. Returns the subset and the kept-index list.
    pub fn stratified_subset(
        &self,
        ratio: f32,
        rng: &mut RngStream,
    ) -> Result<(IndexedDataset, Vec<usize>)> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Param(format!("subset ratio must be in (0,1], got {ratio}")));
        }
        let mut kept: Vec<usize> = Vec::new();
        for (y, list) in self.per_class_lists.iter().enumerate() {
            let keep = (ratio as f64 * list.len() as f64).floor() as usize;
            if keep == 0 {
                return Err(Error::Param(format!(
                    "subset ratio {ratio} empties class {y} (K_y = {})",
                    list.len()
                )));
            }
            let chosen = rng.sample_without_replacement(list.len(), keep);
            kept.extend(chosen.into_iter().map(|k| list[k]));
        }
        kept.sort_unstable();

        let (c, h, w) = (self.images.dim(1), self.images.dim(2), self.images.dim(3));
        let px = c * h * w;
        let mut data = Vec::with_capacity(kept.len() * px);
        let mut labels = Vec::with_capacity(kept.len());
        for &i in &kept {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let images = Tensor::from_vec(&[kept.len(), c, h, w], data);

        let source_index: Vec<usize> = kept.iter().map(|&i| self.to_source_index(i)).collect();

        let mut hasher = Sha256::new();
        hasher.update(self.fingerprint.as_bytes());
        for &i in &source_index {
            hasher.update((i as u64).to_le_bytes());
        }
        let fingerprint = hex_digest(hasher);

        let ds = build_dataset(
            self.name.clone(),
            images,
            labels,
            self.num_classes,
            Some(source_index),
            self.norm,
            fingerprint,
        );
        Ok((ds, kept))
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn build_dataset(
    name: String,
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    source_index: Option<Vec<usize>>,
    norm: Option<(f32, f32)>,
    fingerprint: String,
) -> IndexedDataset {
    let n = labels.len();
    let mut class_counts = vec![0usize; num_classes];
    let mut per_class_lists = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        class_counts[y] += 1;
        per_class_lists[y].push(i);
    }
    IndexedDataset {
        name,
        images,
        labels,
        global_index: (0..n).collect(),
        num_classes,
        class_counts,
        per_class_lists,
        source_index,
        norm,
        fingerprint,
    }
}

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data("truncated IDX header".into()))
}

/// Parse a big-endian IDX image/label pair into an (unnormalized)
/// dataset. Sample order is preserved exactly as stored.
pub fn load_idx(images_path: &Path, labels_path: &Path, name: &str) -> Result<IndexedDataset> {
    let img_bytes = fs::read(images_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", images_path.display())))?;
    let lbl_bytes = fs::read(labels_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", labels_path.display())))?;

    let magic = read_be_u32(&img_bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "bad image magic {magic:#010x} in {}",
            images_path.display()
        )));
    }
    let n = read_be_u32(&img_bytes, 4)? as usize;
    let h = read_be_u32(&img_bytes, 8)? as usize;
    let w = read_be_u32(&img_bytes, 12)? as usize;
    if img_bytes.len() < 16 + n * h * w {
        return Err(Error::Data(format!(
            "image file truncated: header says {n}×{h}×{w}, have {} payload bytes",
            img_bytes.len() - 16
        )));
    }

    let lmagic = read_be_u32(&lbl_bytes, 0)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "bad label magic {lmagic:#010x} in {}",
            labels_path.display()
        )));
    }
    let ln = read_be_u32(&lbl_bytes, 4)? as usize;
    if ln != n {
        return Err(Error::Data(format!(
            "count mismatch: {n} images vs {ln} labels"
        )));
    }
    if lbl_bytes.len() < 8 + ln {
        return Err(Error::Data("label file truncated".into()));
    }

    let data: Vec<f32> = img_bytes[16..16 + n * h * w]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    let labels: Vec<usize> = lbl_bytes[8..8 + ln].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;

    let mut hasher = Sha256::new();
    hasher.update(&img_bytes[16..16 + n * h * w]);
    hasher.update(&lbl_bytes[8..8 + ln]);
    let fingerprint = hex_digest(hasher);

    Ok(build_dataset(
        name.to_string(),
        Tensor::from_vec(&[n, 1, h, w], data),
        labels,
        num_classes,
        None,
        None,
        fingerprint,
    ))
}

/// Bidirectional global ↔ (class, local) index mapping. The local index
/// of sample i is its rank within its class's list ordered by global
/// index; M is the maximum per-class count.
#[derive(Debug, Clone)]
pub struct IndexMaps {
    global_to_local: Vec<(usize, usize)>,
    local_to_global: Vec<Vec<usize>>,
    pub max_class_count: usize,
}

impl IndexMaps {
    pub fn global_to_local(&self, i: usize) -> (usize, usize) {
        self.global_to_local[i]
    }

    pub fn local_to_global(&self, class: usize, k: usize) -> usize {
        self.local_to_global[class][k]
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.local_to_global[class].len()
    }

    pub fn num_classes(&self) -> usize {
        self.local_to_global.len()
    }

    pub fn len(&self) -> usize {
        self.global_to_local.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global_to_local.is_empty()
    }

    pub fn from_parts(per_class_lists: Vec<Vec<usize>>, n: usize) -> Self {
        let mut global_to_local = vec![(usize::MAX, usize::MAX); n];
        for (y, list) in per_class_lists.iter().enumerate() {
            for (k, &g) in list.iter().enumerate() {
                global_to_local[g] = (y, k);
            }
        }
        let max_class_count = per_class_lists.iter().map(Vec::len).max().unwrap_or(0);
        Self {
            global_to_local,
            local_to_global: per_class_lists,
            max_class_count,
        }
    }
}

pub fn build_index_maps(ds: &IndexedDataset) -> IndexMaps {
    IndexMaps::from_parts(ds.per_class_lists.clone(), ds.len())
}

/// §3.1 target distribution: keep the own index with probability 1−α,
/// otherwise draw uniformly from the same-class indices excluding i.
/// Fresh draw on every call.
pub fn sample_mixed_target(
    i: usize,
    y: usize,
    maps: &IndexMaps,
    alpha: f32,
    rng: &mut RngStream,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Param(format!("mixing α must be in [0,1], got {alpha}")));
    }
    let ky = maps.class_count(y);
    if alpha > 0.0 && ky < 2 {
        return Err(Error::Param(format!(
            "mixing α > 0 needs K_y ≥ 2, class {y} has {ky}"
        )));
    }
    if alpha == 0.0 || rng.next_f32() >= alpha {
        return Ok(i);
    }
    let (_, own_k) = maps.global_to_local(i);
    let r = rng.below(ky - 1);
    let k = if r >= own_k { r + 1 } else { r };
    Ok(maps.local_to_global(y, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> IndexedDataset {
        // 10 samples, 2 classes interleaved unevenly
        let labels = vec![0, 1, 0, 0, 1, 0, 1, 1, 1, 0];
        let n = labels.len();
        let images = Tensor::zeros(&[n, 1, 28, 28]);
        build_dataset("tiny".into(), images, labels, 2, None, None, "fp0".into())
    }

    #[test]
    fn maps_roundtrip_and_bounds() {
        let ds = tiny_dataset();
        let maps = build_index_maps(&ds);
        for i in 0..ds.len() {
            let (y, k) = maps.global_to_local(i);
            assert_eq!(y, ds.labels[i]);
            assert!(k < ds.class_counts[y]);
            assert_eq!(maps.local_to_global(y, k), i);
        }
        assert_eq!(maps.max_class_count, 5);
    }

    #[test]
    fn mixing_limits() {
        let ds = tiny_dataset();
        let maps = build_index_maps(&ds);
        let mut rng = RngStream::new(0);
        for i in 0..ds.len() {
            let y = ds.labels[i];
            assert_eq!(sample_mixed_target(i, y, &maps, 0.0, &mut rng).unwrap(), i);
            let t = sample_mixed_target(i, y, &maps, 1.0, &mut rng).unwrap();
            assert_ne!(t, i);
            assert_eq!(ds.labels[t], y);
        }
    }

    #[test]
    fn mixing_degenerate_class_errors() {
        let labels = vec![0, 1, 1];
        let images = Tensor::zeros(&[3, 1, 28, 28]);
        let ds = build_dataset("d".into(), images, labels, 2, None, None, "fp".into());
        let maps = build_index_maps(&ds);
        let mut rng = RngStream::new(0);
        assert!(sample_mixed_target(0, 0, &maps, 0.5, &mut rng).is_err());
        // α = 0 is fine even with a singleton class
        assert_eq!(sample_mixed_target(0, 0, &maps, 0.0, &mut rng).unwrap(), 0);
    }

    #[test]
    fn normalize_roundtrip() {
        let mut ds = tiny_dataset();
        ds.images = ds.images.map(|_| 0.1307);
        let norm = ds.normalize(0.1307, 0.3081).unwrap();
        assert!(norm.images.data().iter().all(|&v| v.abs() < 1e-6));
        let back = norm.denormalize();
        for (a, b) in back.images.data().iter().zip(ds.images.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(ds.normalize(0.0, 0.0).is_err());
    }

    #[test]
    fn subset_ratio_one_is_identity() {
        let ds = tiny_dataset();
        let mut rng = RngStream::new(1);
        let (sub, kept) = ds.stratified_subset(1.0, &mut rng).unwrap();
        assert_eq!(sub.len(), ds.len());
        assert_eq!(kept, (0..ds.len()).collect::<Vec<_>>());
        assert_eq!(sub.labels, ds.labels);
        assert_eq!(sub.source_index.as_ref().unwrap(), &kept);
    }

    #[test]
    fn subset_reproducible_and_proportional() {
        let ds = tiny_dataset();
        let (s1, k1) = ds.stratified_subset(0.6, &mut RngStream::new(5)).unwrap();
        let (_s2, k2) = ds.stratified_subset(0.6, &mut RngStream::new(5)).unwrap();
        assert_eq!(k1, k2);
        // floor(0.6·5) = 3 per class
        assert_eq!(s1.class_counts, vec![3, 3]);
    }

    #[test]
    fn subset_empty_class_errors() {
        let ds = tiny_dataset();
        assert!(ds.stratified_subset(0.05, &mut RngStream::new(1)).is_err());
    }
}
