//! Frozen embedding stores, cosine similarity, and sentence selection.
//!
//! Embeddings arrive precomputed (the upstream encoders are frozen), so this
//! module is about storage and selection only: a binary key→vector store, the
//! cosine ranking used to pick the j sentences most aligned with the image at
//! the same location, and the seeded random selection used by ablations.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::rng::stream;
use crate::{Error, Result};

const STORE_MAGIC: [u8; 4] = *b"GFEB";
const STORE_VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;

/// Key→vector map with one fixed dimension. Values pass through f32 on
/// insert so that memory and disk never disagree: the binary format stores
/// f32, and a load/save cycle must reproduce bytes exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        Ok(EmbeddingStore {
            dim,
            entries: HashMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, key: impl Into<String>, values: &[f64]) -> Result<()> {
        let key = key.into();
        if values.len() != self.dim {
            return Err(Error::data(format!(
                "embedding '{key}' has dim {} but store expects {}",
                values.len(),
                self.dim
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("embedding '{key}' has non-finite values")));
        }
        if self.entries.contains_key(&key) {
            return Err(Error::data(format!("duplicate embedding key '{key}'")));
        }
        let widened = values.iter().map(|&v| v as f32 as f64).collect();
        self.entries.insert(key, widened);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.entries.get(key).map(|v| v.as_slice())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Keys in ascending order (the map itself is unordered).
    pub fn sorted_keys(&self) -> Vec<&str> {
        let mut keys: Vec<&str> = self.entries.keys().map(|k| k.as_str()).collect();
        keys.sort_unstable();
        keys
    }
}

/// Cosine of the angle between two vectors, clamped into [−1, 1] against
/// rounding overshoot.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::data(format!(
            "cosine of vectors with dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numeric("cosine of a zero vector is undefined"));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Pick the j sentence keys most similar to the image embedding at the same
/// location. Sorted by descending similarity with ties by ascending key; if
/// fewer than j sentences exist, the tail is padded by seeded uniform draws
/// with replacement from all available sentences.
pub fn select_top_j(
    image: &[f64],
    sentences: &[(String, Vec<f64>)],
    j: usize,
    seed: u64,
) -> Result<Vec<String>> {
    if sentences.is_empty() {
        return Err(Error::data("cannot select sentences from an empty list"));
    }
    let mut ranked: Vec<(f64, &str)> = sentences
        .iter()
        .map(|(key, emb)| Ok((cosine_similarity(image, emb)?, key.as_str())))
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("non-finite similarity")
            .then(a.1.cmp(b.1))
    });
    let mut out: Vec<String> = ranked
        .iter()
        .take(j)
        .map(|(_, key)| (*key).to_string())
        .collect();
    let mut rng = stream(seed, "sentence-pad", 0);
    while out.len() < j {
        let pick = rng.gen_range(0..sentences.len());
        out.push(sentences[pick].0.clone());
    }
    Ok(out)
}

/// Seeded uniform selection of j sentence keys: without replacement while
/// the list lasts, with replacement beyond. Ablation-only counterpart of
/// [`select_top_j`].
pub fn random_select(sentences: &[(String, Vec<f64>)], j: usize, seed: u64) -> Result<Vec<String>> {
    if sentences.is_empty() {
        return Err(Error::data("cannot select sentences from an empty list"));
    }
    let mut rng = stream(seed, "sentence-random", 0);
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    for i in (1..order.len()).rev() {
        let pick = rng.gen_range(0..=i);
        order.swap(i, pick);
    }
    let mut out: Vec<String> = order
        .into_iter()
        .take(j)
        .map(|i| sentences[i].0.clone())
        .collect();
    while out.len() < j {
        let pick = rng.gen_range(0..sentences.len());
        out.push(sentences[pick].0.clone());
    }
    Ok(out)
}

/// Write a store to disk. Layout, little-endian: magic `GFEB`, version u16,
/// dtype u8 (1 = f32), reserved u8, dim u32, count u64, then per entry
/// [key_len u16, key UTF-8, dim × f32]. Entries are written in ascending key
/// order so identical stores serialize to identical bytes.
pub fn save_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&STORE_MAGIC)?;
    w.write_all(&STORE_VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32, 0u8])?;
    w.write_all(&(store.dim as u32).to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for key in store.sorted_keys() {
        let bytes = key.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::data(format!("embedding key too long ({} bytes)", bytes.len())));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        for &v in store.entries[key].iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<EmbeddingStore> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_array::<4>(&mut r)?;
    if magic != STORE_MAGIC {
        return Err(Error::format("bad store magic"));
    }
    let version = u16::from_le_bytes(read_array::<2>(&mut r)?);
    if version != STORE_VERSION {
        return Err(Error::format(format!("unsupported store version {version}")));
    }
    let [dtype, _reserved] = read_array::<2>(&mut r)?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(format!("unsupported store dtype {dtype}")));
    }
    let dim = u32::from_le_bytes(read_array::<4>(&mut r)?) as usize;
    if dim == 0 {
        return Err(Error::format("store dim must be positive"));
    }
    let count = u64::from_le_bytes(read_array::<8>(&mut r)?) as usize;
    let mut store = EmbeddingStore::new(dim)?;
    let mut value_buf = vec![0u8; dim * 4];
    for _ in 0..count {
        let key_len = u16::from_le_bytes(read_array::<2>(&mut r)?) as usize;
        let mut key_buf = vec![0u8; key_len];
        read_into(&mut r, &mut key_buf)?;
        let key = String::from_utf8(key_buf)
            .map_err(|_| Error::format("store key is not valid UTF-8"))?;
        read_into(&mut r, &mut value_buf)?;
        let values: Vec<f64> = value_buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.insert(key, &values)?;
    }
    let mut probe = [0u8; 1];
    match r.read_exact(&mut probe) {
        Ok(()) => Err(Error::format("trailing bytes after last store entry")),
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => Ok(store),
        Err(e) => Err(e.into()),
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_into(r, &mut buf)?;
    Ok(buf)
}

fn read_into(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::format("unexpected end of store file")
        } else {
            e.into()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_identity_orthogonal_and_diagonal() {
        assert_eq!(cosine_similarity(&[2.0, 3.0], &[2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let d = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((d - 0.7071067811865475).abs() < 1e-15);
        let v = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((v - 0.9746318461970762).abs() < 1e-15);
    }

    #[test]
    fn cosine_is_scale_invariant_and_symmetric() {
        let a = [0.3, -1.2, 0.7];
        let b = [2.0, 0.1, -0.4];
        let ab = cosine_similarity(&a, &b).unwrap();
        let scaled: Vec<f64> = a.iter().map(|v| v * 7.5).collect();
        assert!((cosine_similarity(&scaled, &b).unwrap() - ab).abs() < 1e-15);
        assert_eq!(cosine_similarity(&b, &a).unwrap(), ab);
    }

    #[test]
    fn cosine_rejects_zero_vectors_and_dim_mismatch() {
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    /// Unit vector at angle acos(c) from e1, so cosine to e1 is exactly c.
    fn at_cos(c: f64) -> Vec<f64> {
        vec![c, (1.0 - c * c).sqrt()]
    }

    #[test]
    fn top_j_takes_highest_similarities() {
        let image = [1.0, 0.0];
        let sentences = vec![
            ("s1".to_string(), at_cos(0.9)),
            ("s2".to_string(), at_cos(0.1)),
            ("s3".to_string(), at_cos(0.5)),
        ];
        let picked = select_top_j(&image, &sentences, 2, 0).unwrap();
        assert_eq!(picked, vec!["s1", "s3"]);
    }

    #[test]
    fn top_j_pads_with_replacement_when_short() {
        let image = [1.0, 0.0];
        let sentences = vec![("only".to_string(), at_cos(0.4))];
        let picked = select_top_j(&image, &sentences, 4, 7).unwrap();
        assert_eq!(picked, vec!["only"; 4]);
    }

    #[test]
    fn top_j_full_list_in_descending_order() {
        let image = [1.0, 0.0];
        let sentences = vec![
            ("a".to_string(), at_cos(0.2)),
            ("b".to_string(), at_cos(0.8)),
            ("c".to_string(), at_cos(-0.3)),
        ];
        let picked = select_top_j(&image, &sentences, 3, 0).unwrap();
        assert_eq!(picked, vec!["b", "a", "c"]);
    }

    #[test]
    fn top_j_is_input_order_invariant_and_breaks_ties_by_key() {
        let image = [1.0, 0.0];
        let fwd = vec![
            ("x".to_string(), at_cos(0.5)),
            ("y".to_string(), at_cos(0.5)),
            ("z".to_string(), at_cos(0.9)),
        ];
        let mut rev = fwd.clone();
        rev.reverse();
        let a = select_top_j(&image, &fwd, 2, 3).unwrap();
        let b = select_top_j(&image, &rev, 2, 3).unwrap();
        assert_eq!(a, vec!["z", "x"]);
        assert_eq!(a, b);
    }

    #[test]
    fn top_j_rejects_empty_list() {
        assert!(select_top_j(&[1.0, 0.0], &[], 2, 0).is_err());
    }

    #[test]
    fn random_select_edge_cases() {
        let sentences = vec![
            ("a".to_string(), at_cos(0.1)),
            ("b".to_string(), at_cos(0.2)),
        ];
        assert!(random_select(&sentences, 0, 1).unwrap().is_empty());
        let mut both = random_select(&sentences, 2, 1).unwrap();
        both.sort();
        assert_eq!(both, vec!["a", "b"]);
        assert!(random_select(&[], 1, 1).is_err());
    }

    #[test]
    fn random_select_first_position_is_uniform() {
        let sentences = vec![
            ("a".to_string(), at_cos(0.1)),
            ("b".to_string(), at_cos(0.2)),
            ("c".to_string(), at_cos(0.3)),
        ];
        let mut counts = HashMap::new();
        let trials = 10_000;
        for seed in 0..trials {
            let picked = random_select(&sentences, 1, seed).unwrap();
            *counts.entry(picked[0].clone()).or_insert(0usize) += 1;
        }
        for key in ["a", "b", "c"] {
            let frac = counts[key] as f64 / trials as f64;
            assert!((frac - 1.0 / 3.0).abs() < 0.02, "{key} drawn {frac}");
        }
    }

    #[test]
    fn store_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let mut store = EmbeddingStore::new(3).unwrap();
        store.insert("img:0001", &[0.1, -2.5, 3.25]).unwrap();
        store.insert("img:0002", &[1e-8, 7.75, -0.125]).unwrap();
        save_store(&store, &path).unwrap();
        let loaded = load_store(&path).unwrap();
        assert_eq!(loaded, store);
        for key in store.sorted_keys() {
            let a = store.get(key).unwrap();
            let b = loaded.get(key).unwrap();
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // A second save produces identical bytes.
        let path2 = dir.path().join("emb2.bin");
        save_store(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn store_load_rejects_bad_headers_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let mut store = EmbeddingStore::new(2).unwrap();
        store.insert("k", &[1.0, 2.0]).unwrap();
        save_store(&store, &path).unwrap();

        let good = std::fs::read(&path).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(load_store(&path).is_err());

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(load_store(&path).is_err());

        let truncated = &good[..good.len() - 3];
        std::fs::write(&path, truncated).unwrap();
        let err = load_store(&path).unwrap_err();
        assert!(err.to_string().contains("unexpected end"), "{err}");

        let mut zero_dim = good.clone();
        zero_dim[8..12].copy_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &zero_dim).unwrap();
        assert!(load_store(&path).is_err());

        let mut trailing = good;
        trailing.push(0);
        std::fs::write(&path, &trailing).unwrap();
        assert!(load_store(&path).is_err());
    }

    #[test]
    fn store_insert_validates() {
        let mut store = EmbeddingStore::new(2).unwrap();
        store.insert("a", &[1.0, 2.0]).unwrap();
        assert!(store.insert("a", &[3.0, 4.0]).is_err());
        assert!(store.insert("b", &[1.0]).is_err());
        assert!(store.insert("c", &[f64::NAN, 0.0]).is_err());
        assert!(EmbeddingStore::new(0).is_err());
    }
}
