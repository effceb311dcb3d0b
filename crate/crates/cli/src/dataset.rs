//! Builds the dataset a config names and records its identity: a SHA-256
//! of every input file, or of the generated tensors for synthetic data.

use std::path::{Path, PathBuf};

use nasgraph::data::{
    decode_mnist, parse_cifar10, read_file, synthetic_dataset, DataError, Dataset, Normalization, SyntheticSpec,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataConfig, DatasetKind};

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIdentity {
    pub kind: DatasetKind,
    pub files: Vec<FileDigest>,
    /// Digest over the file digests in order, or over the synthetic tensors.
    pub sha256: String,
    pub classes: usize,
    pub input_shape: [usize; 3],
    pub train_size: usize,
    pub test_size: usize,
    pub normalization: Normalization,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn digest_file(path: &Path) -> Result<(Vec<u8>, FileDigest), DataError> {
    let bytes = read_file(path)?;
    let d = FileDigest {
        path: path.to_path_buf(),
        bytes: bytes.len() as u64,
        sha256: hex(&Sha256::digest(&bytes)),
    };
    Ok((bytes, d))
}

fn cifar_batches(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let io = |e: std::io::Error| DataError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    };
    let mut train: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    if train.is_empty() {
        return Err(DataError::Io {
            path: dir.display().to_string(),
            message: "no data_batch_*.bin files".into(),
        });
    }
    train.sort();
    train.push(dir.join("test_batch.bin"));
    Ok(train)
}

pub fn load(cfg: &DataConfig) -> Result<(Dataset, DatasetIdentity), DataError> {
    let mut files = Vec::new();
    let dataset = match cfg.dataset {
        DatasetKind::Synthetic => {
            let spec = SyntheticSpec {
                classes: cfg.synthetic_classes,
                train_size: cfg.synthetic_train,
                test_size: cfg.synthetic_test,
                image_dim: cfg.synthetic_dim,
                channels: cfg.synthetic_channels,
                noise: cfg.synthetic_noise,
            };
            let mut d = synthetic_dataset(&spec, cfg.synthetic_seed)?;
            if let Some(n) = cfg.train_limit {
                let keep: Vec<usize> = (0..n.min(d.train.len())).collect();
                d.train = d.train.select(&keep);
            }
            d
        }
        DatasetKind::Mnist => {
            let dir = cfg.data_dir.as_deref().unwrap_or(Path::new("."));
            let mut blobs = Vec::new();
            for name in MNIST_FILES {
                let (bytes, d) = digest_file(&dir.join(name))?;
                blobs.push(bytes);
                files.push(d);
            }
            let mut train = decode_mnist(&blobs[0], &blobs[1])?;
            let test = decode_mnist(&blobs[2], &blobs[3])?;
            if let Some(n) = cfg.train_limit {
                train = train.take(n);
            }
            Dataset::from_raw(&train, &test, 10)?
        }
        DatasetKind::Cifar10 => {
            let dir = cfg.data_dir.as_deref().unwrap_or(Path::new("."));
            let paths = cifar_batches(dir)?;
            let mut train_bytes = Vec::new();
            let mut test_bytes = Vec::new();
            for (i, p) in paths.iter().enumerate() {
                let (bytes, d) = digest_file(p)?;
                files.push(d);
                if i + 1 == paths.len() {
                    test_bytes = bytes;
                } else {
                    train_bytes.extend_from_slice(&bytes);
                }
            }
            let mut train = parse_cifar10(&train_bytes)?;
            let test = parse_cifar10(&test_bytes)?;
            if let Some(n) = cfg.train_limit {
                train = train.take(n);
            }
            Dataset::from_raw(&train, &test, 10)?
        }
    };

    let mut h = Sha256::new();
    if files.is_empty() {
        for split in [&dataset.train, &dataset.test] {
            for v in split.images.data() {
                h.update(v.to_le_bytes());
            }
            for &l in &split.labels {
                h.update((l as u32).to_le_bytes());
            }
        }
    } else {
        for f in &files {
            h.update(f.sha256.as_bytes());
        }
    }
    let s = dataset.input_shape;
    let identity = DatasetIdentity {
        kind: cfg.dataset,
        files,
        sha256: hex(&h.finalize()),
        classes: dataset.classes,
        input_shape: [s.c, s.h, s.w],
        train_size: dataset.train.len(),
        test_size: dataset.test.len(),
        normalization: dataset.normalization.clone(),
    };
    Ok((dataset, identity))
}
