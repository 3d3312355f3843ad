//! In-memory image embedding store.
//!
//! Embedding file: one JSON object per line, `{"id": "...", "vector": [..]}`.
//! The first record fixes the dimension. Category file: one JSON object per
//! line, `{"category": "...", "members": ["id", ..]}`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::ImageId;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: image {id} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        line: usize,
        id: ImageId,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate image id {id}")]
    DuplicateId { line: usize, id: ImageId },
    #[error("line {line}: category {category} appears twice")]
    DuplicateCategory { line: usize, category: String },
    #[error("category {category} lists unknown image {id}")]
    UnknownMember { category: String, id: ImageId },
    #[error("image {0} has no embedding")]
    MissingEmbedding(ImageId),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: ImageId,
    pub vector: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub category: String,
    pub members: Vec<ImageId>,
}

/// Image id to fixed-dimension feature vector, plus optional category
/// membership. Immutable once built; ids are kept in sorted order so every
/// iteration over the store is deterministic regardless of file order.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<ImageId>,
    index: HashMap<ImageId, usize>,
    data: Vec<f32>,
    categories: BTreeMap<String, BTreeSet<ImageId>>,
}

impl EmbeddingStore {
    /// Build a store from `(id, vector)` pairs. The first vector fixes the
    /// dimension. Line numbers in errors are 1-based positions in `entries`.
    pub fn from_entries<I>(entries: I) -> Result<Self, EmbeddingError>
    where
        I: IntoIterator<Item = (ImageId, Vec<f32>)>,
    {
        let mut rows: Vec<(ImageId, Vec<f32>)> = Vec::new();
        let mut seen = HashMap::new();
        let mut dim = None;
        for (i, (id, v)) in entries.into_iter().enumerate() {
            let line = i + 1;
            let expected = *dim.get_or_insert(v.len());
            if v.is_empty() {
                return Err(EmbeddingError::Parse {
                    line,
                    message: format!("image {id} has an empty vector"),
                });
            }
            if v.len() != expected {
                return Err(EmbeddingError::DimensionMismatch {
                    line,
                    id,
                    expected,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EmbeddingError::Parse {
                    line,
                    message: format!("image {id} has a non-finite component"),
                });
            }
            if seen.insert(id.clone(), line).is_some() {
                return Err(EmbeddingError::DuplicateId { line, id });
            }
            rows.push((id, v));
        }
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let dim = dim.unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut ids = Vec::with_capacity(rows.len());
        let mut index = HashMap::with_capacity(rows.len());
        for (i, (id, v)) in rows.into_iter().enumerate() {
            data.extend_from_slice(&v);
            index.insert(id.clone(), i);
            ids.push(id);
        }
        Ok(Self {
            dim,
            ids,
            index,
            data,
            categories: BTreeMap::new(),
        })
    }

    pub fn read_embeddings<R: BufRead>(reader: R) -> Result<Self, EmbeddingError> {
        let mut entries = Vec::new();
        let mut line_numbers = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| EmbeddingError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| EmbeddingError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            entries.push((rec.id, rec.vector));
            line_numbers.push(line_no);
        }
        // Re-map record positions back to physical line numbers.
        Self::from_entries(entries).map_err(|e| relabel(e, &line_numbers))
    }

    pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_embeddings(BufReader::new(f))
    }

    pub fn read_categories<R: BufRead>(&mut self, reader: R) -> Result<(), EmbeddingError> {
        let mut categories = BTreeMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| EmbeddingError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CategoryRecord = serde_json::from_str(&line).map_err(|e| EmbeddingError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            for id in &rec.members {
                if !self.index.contains_key(id) {
                    return Err(EmbeddingError::UnknownMember {
                        category: rec.category.clone(),
                        id: id.clone(),
                    });
                }
            }
            if categories.contains_key(&rec.category) {
                return Err(EmbeddingError::DuplicateCategory {
                    line: line_no,
                    category: rec.category,
                });
            }
            categories.insert(rec.category, rec.members.into_iter().collect());
        }
        self.categories = categories;
        Ok(())
    }

    pub fn load_categories(&mut self, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.read_categories(BufReader::new(f))
    }

    pub fn set_categories(
        &mut self,
        categories: BTreeMap<String, BTreeSet<ImageId>>,
    ) -> Result<(), EmbeddingError> {
        for (category, members) in &categories {
            if let Some(id) = members.iter().find(|id| !self.index.contains_key(*id)) {
                return Err(EmbeddingError::UnknownMember {
                    category: category.clone(),
                    id: id.clone(),
                });
            }
        }
        self.categories = categories;
        Ok(())
    }

    pub fn write_embeddings<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for id in &self.ids {
            let rec = EmbeddingRecord {
                id: id.clone(),
                vector: self.vector(id).expect("id from store").to_vec(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_categories<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (category, members) in &self.categories {
            let rec = CategoryRecord {
                category: category.clone(),
                members: members.iter().cloned().collect(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// All image ids in sorted order.
    pub fn ids(&self) -> &[ImageId] {
        &self.ids
    }

    pub fn contains(&self, id: &ImageId) -> bool {
        self.index.contains_key(id)
    }

    pub fn vector(&self, id: &ImageId) -> Option<&[f32]> {
        self.index
            .get(id)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn require(&self, id: &ImageId) -> Result<&[f32], EmbeddingError> {
        self.vector(id)
            .ok_or_else(|| EmbeddingError::MissingEmbedding(id.clone()))
    }

    pub fn categories(&self) -> &BTreeMap<String, BTreeSet<ImageId>> {
        &self.categories
    }

    /// Category names containing `id`, in sorted order.
    pub fn categories_of<'a>(&'a self, id: &'a ImageId) -> impl Iterator<Item = &'a str> + 'a {
        self.categories
            .iter()
            .filter(move |(_, members)| members.contains(id))
            .map(|(name, _)| name.as_str())
    }

    pub fn distance(&self, a: &ImageId, b: &ImageId) -> Result<f64, EmbeddingError> {
        Ok(euclidean(self.require(a)?, self.require(b)?))
    }
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub fn euclidean_to_point(a: &[f32], p: &[f64]) -> f64 {
    a.iter()
        .zip(p)
        .map(|(x, y)| {
            let d = f64::from(*x) - y;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn relabel(e: EmbeddingError, lines: &[usize]) -> EmbeddingError {
    let map = |l: usize| lines.get(l.wrapping_sub(1)).copied().unwrap_or(l);
    match e {
        EmbeddingError::Parse { line, message } => EmbeddingError::Parse { line: map(line), message },
        EmbeddingError::DimensionMismatch { line, id, expected, found } => EmbeddingError::DimensionMismatch {
            line: map(line),
            id,
            expected,
            found,
        },
        EmbeddingError::DuplicateId { line, id } => EmbeddingError::DuplicateId { line: map(line), id },
        other => other,
    }
}
