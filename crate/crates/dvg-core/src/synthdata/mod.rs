//! Synthetic paired two-modality dataset.
//!
//! Identities are procedural glyphs; each sample renders one glyph under
//! shared nuisance into two modalities with a fixed appearance shift between
//! them. Builds are a pure function of the seed, so the same configuration
//! always produces the same file bytes.

pub mod format;
pub mod render;

use std::path::Path;

pub use format::{
    read_blob, read_manifest, write_blob, write_manifest, DatasetManifest, Modality, PairRecord,
    SplitEntry, BLOB_MAGIC, BLOB_NAME, BLOB_VERSION, MANIFEST_NAME,
};
pub use render::{
    render_pair, sample_glyph, sample_nuisance, warp_image, GlyphParams, Nuisance, IMAGE_PIXELS,
    IMAGE_SIDE,
};

use crate::error::DataError;
use crate::rng::{RandomSource, ALGORITHM_ID};

/// Shape of a dataset build.
#[derive(Clone, Copy, Debug)]
pub struct DatasetSpec {
    pub train_identities: u32,
    pub test_identities: u32,
    pub samples_per_identity: u32,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn with_seed(seed: u64) -> Self {
        DatasetSpec { train_identities: 100, test_identities: 30, samples_per_identity: 20, seed }
    }
}

/// In-memory paired dataset with disjoint train/test identity ranges.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub train: Vec<PairRecord>,
    pub test: Vec<PairRecord>,
    pub samples_per_identity: usize,
    pub seed: u64,
}

impl PairedDataset {
    /// Sorted distinct identities of a split.
    pub fn identities(split: &[PairRecord]) -> Vec<u32> {
        let mut ids: Vec<u32> = split.iter().map(|p| p.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Stack one modality of the selected pairs into a `[idxs.len(), dim]`
/// matrix, rows in index order.
pub fn gather_images(
    pairs: &[PairRecord],
    idxs: &[usize],
    modality: Modality,
) -> crate::tensor::Tensor {
    assert!(!idxs.is_empty(), "cannot build an empty image batch");
    let dim = pairs[idxs[0]].n.len();
    let mut data = Vec::with_capacity(idxs.len() * dim);
    for &i in idxs {
        data.extend_from_slice(pairs[i].image(modality));
    }
    crate::tensor::Tensor::matrix(idxs.len(), dim, data)
}

fn render_identity(
    root: &RandomSource,
    id: u32,
    samples_per_identity: u32,
    out: &mut Vec<PairRecord>,
) {
    let mut stream = root.derive(&format!("identity/{id}"));
    let glyph = sample_glyph(&mut stream);
    for _ in 0..samples_per_identity {
        let nuisance = sample_nuisance(&mut stream);
        let (n, v) = render_pair(&glyph, &nuisance);
        out.push(PairRecord { identity: id, n, v });
    }
}

/// Render the full dataset. Identity parameters depend only on
/// (seed, identity id), never on split sizes of other identities.
pub fn build_dataset(spec: &DatasetSpec) -> PairedDataset {
    assert!(spec.train_identities > 0, "train_identities must be positive");
    assert!(spec.test_identities > 0, "test_identities must be positive");
    assert!(spec.samples_per_identity > 0, "samples_per_identity must be positive");
    let root = RandomSource::from_master(spec.seed).derive("synthdata");
    let mut train = Vec::with_capacity((spec.train_identities * spec.samples_per_identity) as usize);
    for id in 0..spec.train_identities {
        render_identity(&root, id, spec.samples_per_identity, &mut train);
    }
    let mut test = Vec::with_capacity((spec.test_identities * spec.samples_per_identity) as usize);
    for id in spec.train_identities..spec.train_identities + spec.test_identities {
        render_identity(&root, id, spec.samples_per_identity, &mut test);
    }
    PairedDataset {
        train,
        test,
        samples_per_identity: spec.samples_per_identity as usize,
        seed: spec.seed,
    }
}

/// Write `manifest.json` + `images.bin` into `dir` (created if absent).
pub fn save_dataset(dir: &Path, ds: &PairedDataset, config_hash: &str) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| DataError::Io { path: dir.display().to_string(), source: e })?;
    let train_ids = PairedDataset::identities(&ds.train);
    let test_ids = PairedDataset::identities(&ds.test);
    let splits = vec![
        SplitEntry {
            name: "train".into(),
            identity_start: *train_ids.first().unwrap_or(&0),
            identity_count: train_ids.len() as u32,
            pair_start: 0,
            pair_count: ds.train.len(),
        },
        SplitEntry {
            name: "test".into(),
            identity_start: *test_ids.first().unwrap_or(&0),
            identity_count: test_ids.len() as u32,
            pair_start: ds.train.len(),
            pair_count: ds.test.len(),
        },
    ];
    let manifest = DatasetManifest {
        format_version: BLOB_VERSION,
        seed: ds.seed,
        rng_algorithm: ALGORITHM_ID.into(),
        image_side: IMAGE_SIDE,
        samples_per_identity: ds.samples_per_identity,
        generated: false,
        config_hash: config_hash.into(),
        splits,
    };
    write_manifest(&dir.join(MANIFEST_NAME), &manifest)?;
    let mut all = Vec::with_capacity(ds.train.len() + ds.test.len());
    all.extend_from_slice(&ds.train);
    all.extend_from_slice(&ds.test);
    write_blob(&dir.join(BLOB_NAME), &all)
}

fn take_split(
    pairs: &[PairRecord],
    entry: &SplitEntry,
    manifest_path: &str,
) -> Result<Vec<PairRecord>, DataError> {
    let end = entry.pair_start.checked_add(entry.pair_count).filter(|&e| e <= pairs.len());
    let end = end.ok_or_else(|| DataError::Manifest {
        path: manifest_path.into(),
        detail: format!(
            "split `{}` claims pairs {}..{} but blob holds {}",
            entry.name,
            entry.pair_start,
            entry.pair_start + entry.pair_count,
            pairs.len()
        ),
    })?;
    let slice = &pairs[entry.pair_start..end];
    for p in slice {
        let lo = entry.identity_start;
        let hi = entry.identity_start + entry.identity_count;
        if p.identity < lo || p.identity >= hi {
            return Err(DataError::Manifest {
                path: manifest_path.into(),
                detail: format!(
                    "split `{}` expects identities {}..{} but blob holds {}",
                    entry.name, lo, hi, p.identity
                ),
            });
        }
    }
    Ok(slice.to_vec())
}

/// Read back a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(PairedDataset, DatasetManifest), DataError> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let manifest = read_manifest(&manifest_path)?;
    let pairs = read_blob(&dir.join(BLOB_NAME))?;
    let mp = manifest_path.display().to_string();
    let find = |name: &str| {
        manifest.splits.iter().find(|s| s.name == name).ok_or_else(|| DataError::Manifest {
            path: mp.clone(),
            detail: format!("manifest lacks a `{name}` split"),
        })
    };
    let train = take_split(&pairs, find("train")?, &mp)?;
    let test = take_split(&pairs, find("test")?, &mp)?;
    Ok((
        PairedDataset {
            train,
            test,
            samples_per_identity: manifest.samples_per_identity,
            seed: manifest.seed,
        },
        manifest,
    ))
}

/// Write a generated pool: same blob format, one `generated` split,
/// identity field = draw index.
pub fn save_pool(
    dir: &Path,
    pairs: &[PairRecord],
    seed: u64,
    config_hash: &str,
) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| DataError::Io { path: dir.display().to_string(), source: e })?;
    let manifest = DatasetManifest {
        format_version: BLOB_VERSION,
        seed,
        rng_algorithm: ALGORITHM_ID.into(),
        image_side: IMAGE_SIDE,
        samples_per_identity: 1,
        generated: true,
        config_hash: config_hash.into(),
        splits: vec![SplitEntry {
            name: "generated".into(),
            identity_start: 0,
            identity_count: pairs.len() as u32,
            pair_start: 0,
            pair_count: pairs.len(),
        }],
    };
    write_manifest(&dir.join(MANIFEST_NAME), &manifest)?;
    write_blob(&dir.join(BLOB_NAME), pairs)
}

/// Read back a pool directory written by [`save_pool`].
pub fn load_pool(dir: &Path) -> Result<(Vec<PairRecord>, DatasetManifest), DataError> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let manifest = read_manifest(&manifest_path)?;
    if !manifest.generated {
        return Err(DataError::Manifest {
            path: manifest_path.display().to_string(),
            detail: "expected a generated pool (generated: true)".into(),
        });
    }
    let pairs = read_blob(&dir.join(BLOB_NAME))?;
    Ok((pairs, manifest))
}
