use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::SeriesDataset;
use crate::error::{LfitError, Result};

/// Sorted unique values of one categorical attribute; the position is the index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub attribute: String,
    pub values: Vec<String>,
}

impl Vocabulary {
    pub fn from_values<'a>(attribute: &str, values: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v: Vec<String> = values.into_iter().map(String::from).collect();
        v.sort();
        v.dedup();
        Self {
            attribute: attribute.into(),
            values: v,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, value: &str) -> Result<usize> {
        self.values
            .binary_search_by(|v| v.as_str().cmp(value))
            .map_err(|_| LfitError::OutOfVocabulary {
                attribute: self.attribute.clone(),
                value: value.into(),
            })
    }
}

/// Builds one vocabulary per static attribute and the per-series index vectors.
pub fn encode_statics(ds: &SeriesDataset) -> Result<(Vec<Vocabulary>, Vec<Vec<usize>>)> {
    let vocabs: Vec<Vocabulary> = ds
        .static_attrs
        .iter()
        .enumerate()
        .map(|(a, name)| Vocabulary::from_values(name, ds.series.iter().map(|s| s.statics[a].as_str())))
        .collect();
    let indices = ds
        .series
        .iter()
        .map(|s| {
            vocabs
                .iter()
                .zip(&s.statics)
                .map(|(v, val)| v.index_of(val))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((vocabs, indices))
}

/// Per-series indices under existing vocabularies (e.g. a loaded model's).
pub fn index_statics(ds: &SeriesDataset, vocabs: &[Vocabulary]) -> Result<Vec<Vec<usize>>> {
    if vocabs.len() != ds.static_attrs.len()
        || vocabs.iter().zip(&ds.static_attrs).any(|(v, a)| &v.attribute != a)
    {
        return Err(LfitError::Contract(alloc::format!(
            "static attributes {:?} do not match vocabularies {:?}",
            ds.static_attrs,
            vocabs.iter().map(|v| v.attribute.as_str()).collect::<Vec<_>>()
        )));
    }
    ds.series
        .iter()
        .map(|s| vocabs.iter().zip(&s.statics).map(|(v, val)| v.index_of(val)).collect())
        .collect()
}
