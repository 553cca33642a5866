//! Multi-domain identity datasets.
//!
//! On disk a dataset root holds one directory per domain, one directory per
//! identity inside it, and PPM images inside those:
//! `root/<domain>/<identity>/<image>.ppm`. Directory entries are sorted so
//! the global class order never depends on filesystem enumeration order.

mod synthetic;

pub use synthetic::{generate_synthetic, SyntheticSpec, MANIFEST_FILE};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::imaging::{read_ppm, resize_bilinear, Image, ImagingError};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("dataset root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("dataset root {0} contains no domain directories")]
    NoDomains(PathBuf),
    #[error("domain {0} contains no identity directories")]
    EmptyDomain(PathBuf),
    #[error("identity {0} contains no .ppm images")]
    EmptyIdentity(PathBuf),
    #[error("cannot read image: {0}")]
    Image(#[from] ImagingError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("class {class} is outside the label space of {total} classes")]
    InvalidClass { class: usize, total: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityRecord {
    /// Directory name of the identity.
    pub name: String,
    pub images: Vec<PathBuf>,
}

/// One source domain. Local labels are positions in `identities`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainDataset {
    pub name: String,
    pub identities: Vec<IdentityRecord>,
}

impl DomainDataset {
    pub fn image_count(&self) -> usize {
        self.identities.iter().map(|i| i.images.len()).sum()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |source| DataError::Io { path: dir.to_path_buf(), source };
    let mut entries = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(io)?;
    entries.sort();
    Ok(entries)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Scans a dataset tree. Images are not decoded here.
pub fn load_dataset(root: &Path) -> Result<Vec<DomainDataset>> {
    if !root.is_dir() {
        return Err(DataError::MissingRoot(root.to_path_buf()));
    }
    let mut domains = Vec::new();
    for domain_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let mut identities = Vec::new();
        for id_dir in sorted_entries(&domain_dir)?.into_iter().filter(|p| p.is_dir()) {
            let images: Vec<PathBuf> = sorted_entries(&id_dir)?
                .into_iter()
                .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "ppm"))
                .collect();
            if images.is_empty() {
                return Err(DataError::EmptyIdentity(id_dir));
            }
            identities.push(IdentityRecord { name: file_name(&id_dir), images });
        }
        if identities.is_empty() {
            return Err(DataError::EmptyDomain(domain_dir));
        }
        domains.push(DomainDataset { name: file_name(&domain_dir), identities });
    }
    if domains.is_empty() {
        return Err(DataError::NoDomains(root.to_path_buf()));
    }
    Ok(domains)
}

/// Union of disjoint per-domain label sets. Global classes run over domains
/// in order, then local labels in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    per_domain_sizes: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl LabelSpace {
    pub fn from_sizes(sizes: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut total = 0;
        for &s in sizes {
            offsets.push(total);
            total += s;
        }
        LabelSpace { per_domain_sizes: sizes.to_vec(), offsets, total }
    }

    pub fn domain_count(&self) -> usize {
        self.per_domain_sizes.len()
    }

    pub fn per_domain_sizes(&self) -> &[usize] {
        &self.per_domain_sizes
    }

    /// Total class count N.
    pub fn num_classes(&self) -> usize {
        self.total
    }

    pub fn global(&self, domain: usize, local: usize) -> Option<usize> {
        (local < *self.per_domain_sizes.get(domain)?).then(|| self.offsets[domain] + local)
    }

    pub fn local(&self, global: usize) -> Option<(usize, usize)> {
        self.offsets
            .iter()
            .zip(&self.per_domain_sizes)
            .position(|(&o, &s)| o <= global && global < o + s)
            .map(|d| (d, global - self.offsets[d]))
    }
}

pub fn union_label_space(datasets: &[DomainDataset]) -> LabelSpace {
    let sizes: Vec<usize> = datasets.iter().map(|d| d.identities.len()).collect();
    LabelSpace::from_sizes(&sizes)
}

/// Address of one image in a [`Corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageRef {
    pub class: usize,
    pub index: usize,
}

/// Decoded images of every identity, resized to the canonical input size
/// and indexed by global class.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub datasets: Vec<DomainDataset>,
    pub label_space: LabelSpace,
    images: Vec<Vec<Image>>,
    refs: Vec<ImageRef>,
}

impl Corpus {
    pub fn load(root: &Path, height: usize, width: usize) -> Result<Self> {
        let datasets = load_dataset(root)?;
        Self::from_datasets(datasets, height, width)
    }

    pub fn from_datasets(datasets: Vec<DomainDataset>, height: usize, width: usize) -> Result<Self> {
        let mut images = Vec::new();
        for domain in &datasets {
            for identity in &domain.identities {
                let decoded = identity
                    .images
                    .iter()
                    .map(|p| read_ppm(p).and_then(|img| resize_bilinear(&img, height, width)))
                    .collect::<Result<Vec<_>, _>>()?;
                images.push(decoded);
            }
        }
        let label_space = union_label_space(&datasets);
        Ok(Self::assemble(datasets, label_space, images))
    }

    /// Builds a corpus directly from in-memory images, one list per class.
    pub fn from_images(images: Vec<Vec<Image>>) -> Result<Self> {
        if let Some(class) = images.iter().position(|v| v.is_empty()) {
            return Err(DataError::EmptyIdentity(PathBuf::from(format!("<memory>/{class}"))));
        }
        let label_space = LabelSpace::from_sizes(&[images.len()]);
        let datasets = vec![DomainDataset {
            name: "memory".into(),
            identities: images
                .iter()
                .enumerate()
                .map(|(i, v)| IdentityRecord { name: format!("{i}"), images: vec![PathBuf::new(); v.len()] })
                .collect(),
        }];
        Ok(Self::assemble(datasets, label_space, images))
    }

    fn assemble(datasets: Vec<DomainDataset>, label_space: LabelSpace, images: Vec<Vec<Image>>) -> Self {
        let refs = images
            .iter()
            .enumerate()
            .flat_map(|(class, imgs)| (0..imgs.len()).map(move |index| ImageRef { class, index }))
            .collect();
        Corpus { datasets, label_space, images, refs }
    }

    pub fn num_classes(&self) -> usize {
        self.images.len()
    }

    pub fn image_count(&self) -> usize {
        self.refs.len()
    }

    /// Every image in class order.
    pub fn refs(&self) -> &[ImageRef] {
        &self.refs
    }

    pub fn images_of(&self, class: usize) -> Result<&[Image]> {
        self.images
            .get(class)
            .map(Vec::as_slice)
            .ok_or(DataError::InvalidClass { class, total: self.images.len() })
    }

    pub fn image(&self, r: ImageRef) -> &Image {
        &self.images[r.class][r.index]
    }

    /// Uniform draw over the images of one identity.
    pub fn image_of_identity(&self, class: usize, rng: &mut impl Rng) -> Result<ImageRef> {
        let n = self.images_of(class)?.len();
        Ok(ImageRef { class, index: rng.gen_range(0..n) })
    }
}

/// A mini-batch of image addresses; labels are their global classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBatch {
    pub refs: Vec<ImageRef>,
}

impl MiniBatch {
    pub fn labels(&self) -> Vec<usize> {
        self.refs.iter().map(|r| r.class).collect()
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }
}

/// Cuts one shuffled pass over all corpus images into mini-batches of
/// `batch_size`; the final batch holds the remainder.
pub fn epoch_batches(corpus: &Corpus, batch_size: usize, rng: &mut impl Rng) -> Vec<MiniBatch> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order = corpus.refs().to_vec();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| MiniBatch { refs: c.to_vec() }).collect()
}

/// Draws the first mini-batch of a freshly shuffled epoch.
pub fn sample_minibatch(corpus: &Corpus, batch_size: usize, rng: &mut impl Rng) -> MiniBatch {
    epoch_batches(corpus, batch_size, rng).into_iter().next().unwrap_or(MiniBatch { refs: Vec::new() })
}
