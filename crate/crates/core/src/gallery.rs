//! Augmentation-expanded gallery of labelled embeddings, nearest-neighbour
//! classification and its versioned binary index file.
//!
//! Index layout (little endian):
//!
//! ```text
//! magic "RSGALLRY" | version u32 | fingerprint (u32 len, utf8)
//! | aug params 8 × f64 | seed u64 | n_aug u32 | dim u32 | count u32
//! | count × (label (u32 len, utf8), dim × f32) | sha256 of all preceding bytes
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use sha2::{Digest, Sha256};

use crate::embedder::{augment, derive_seed, AugmentParams, Embedder, Embedding};
use crate::error::{Error, Result};
use crate::imageio::resize_square;

pub const INDEX_MAGIC: &[u8; 8] = b"RSGALLRY";
pub const INDEX_VERSION: u32 = 1;

/// One canonical reference image of a product class.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryProduct {
    pub label: String,
    pub image: RgbImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryMeta {
    /// Hash of the embedder weights archive the entries were encoded with.
    pub fingerprint: String,
    pub aug: AugmentParams,
    pub seed: u64,
    pub n_aug: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    pub meta: GalleryMeta,
    entries: Vec<(String, Embedding)>,
}

impl GalleryIndex {
    pub fn new(meta: GalleryMeta, entries: Vec<(String, Embedding)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("gallery index needs at least one entry"));
        }
        let dim = entries[0].1.dim();
        if entries.iter().any(|(_, e)| e.dim() != dim) {
            return Err(Error::Shape("gallery embeddings differ in dimension".into()));
        }
        Ok(Self { meta, entries })
    }

    pub fn entries(&self) -> &[(String, Embedding)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].1.dim()
    }

    /// Distinct labels in lexicographic order.
    pub fn labels(&self) -> Vec<&str> {
        let mut l: Vec<&str> = self.entries.iter().map(|(l, _)| l.as_str()).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// Errors with [`Error::StaleGallery`] when built from other weights.
    pub fn verify_fingerprint(&self, current: &str) -> Result<()> {
        if self.meta.fingerprint == current {
            Ok(())
        } else {
            Err(Error::StaleGallery { index: self.meta.fingerprint.clone(), current: current.to_string() })
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        put_str(&mut out, &self.meta.fingerprint);
        let a = &self.meta.aug;
        for v in [
            a.blur_sigma.0 as f64,
            a.blur_sigma.1 as f64,
            a.crop_fraction.0,
            a.crop_fraction.1,
            a.brightness.0 as f64,
            a.brightness.1 as f64,
            a.saturation.0 as f64,
            a.saturation.1 as f64,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        out.extend_from_slice(&(self.meta.n_aug as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (label, e) in &self.entries {
            put_str(&mut out, label);
            for v in e.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt { what: "gallery index", reason: reason.to_string() };
        if bytes.len() < INDEX_MAGIC.len() + 4 + 32 || &bytes[..8] != INDEX_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let fingerprint = r.string()?;
        let mut f = [0f64; 8];
        for v in &mut f {
            *v = r.f64()?;
        }
        let aug = AugmentParams {
            blur_sigma: (f[0] as f32, f[1] as f32),
            crop_fraction: (f[2], f[3]),
            brightness: (f[4] as f32, f[5] as f32),
            saturation: (f[6] as f32, f[7] as f32),
        };
        let seed = r.u64()?;
        let n_aug = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(body.len()));
        for _ in 0..count {
            let label = r.string()?;
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                v.push(f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")));
            }
            let e = Embedding::from_unit(v).map_err(|e| corrupt(&e.to_string()))?;
            entries.push((label, e));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        GalleryIndex::new(GalleryMeta { fingerprint, aug, seed, n_aug }, entries).map_err(|e| corrupt(&e.to_string()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Corrupt {
            what: "gallery index",
            reason: "truncated".into(),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Corrupt { what: "gallery index", reason: "label is not utf-8".into() })
    }
}

/// Encodes every query image plus `n_aug` augmentations of it. Augmentation
/// `k` of product `i` uses `derive_seed(seed, [i, k])`.
pub fn build_gallery(
    db: &[QueryProduct],
    embedder: &Embedder<f32>,
    fingerprint: &str,
    n_aug: usize,
    aug: &AugmentParams,
    seed: u64,
) -> Result<GalleryIndex> {
    if db.is_empty() {
        return Err(Error::EmptyDataset("query database is empty".into()));
    }
    aug.validate()?;
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = db.iter().find(|q| !seen.insert(q.label.as_str())) {
        return Err(Error::invalid(format!("duplicate query label {:?}", dup.label)));
    }
    let mut entries = Vec::with_capacity(db.len() * (n_aug + 1));
    for (i, q) in db.iter().enumerate() {
        let img = resize_square(&q.image, embedder.config.input_size);
        entries.push((q.label.clone(), embedder.encode(&img)?));
        for k in 1..=n_aug {
            let variant = augment(&img, aug, derive_seed(seed, &[i as u64, k as u64]));
            entries.push((q.label.clone(), embedder.encode(&variant)?));
        }
    }
    GalleryIndex::new(GalleryMeta { fingerprint: fingerprint.to_string(), aug: *aug, seed, n_aug }, entries)
}

/// Nearest entry by squared distance; ties go to the lexicographically
/// smaller label, then to the earlier entry.
pub fn classify(e: &Embedding, index: &GalleryIndex) -> (String, f64) {
    let mut best: Option<(&str, f64)> = None;
    for (label, x) in index.entries() {
        let d = e.squared_distance(x);
        let better = match best {
            None => true,
            Some((bl, bd)) => d < bd || (d == bd && label.as_str() < bl),
        };
        if better {
            best = Some((label, d));
        }
    }
    let (l, d) = best.expect("index is non-empty");
    (l.to_string(), d)
}

/// Up to `k` distinct labels ranked by their nearest entry.
pub fn topk(e: &Embedding, index: &GalleryIndex, k: usize) -> Vec<(String, f64)> {
    let mut per_label: BTreeMap<&str, f64> = BTreeMap::new();
    for (label, x) in index.entries() {
        let d = e.squared_distance(x);
        per_label.entry(label).and_modify(|m| *m = m.min(d)).or_insert(d);
    }
    let mut ranked: Vec<(&str, f64)> = per_label.into_iter().collect();
    // BTreeMap order makes the stable sort break distance ties by label
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
    ranked.into_iter().take(k).map(|(l, d)| (l.to_string(), d)).collect()
}

pub fn save_index(index: &GalleryIndex, path: &Path) -> Result<()> {
    std::fs::write(path, index.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_index(path: &Path) -> Result<GalleryIndex> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    GalleryIndex::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::EmbedderConfig;
    use crate::pyramid::EncoderConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut impl Rng, dim: usize) -> Embedding {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Embedding::from_raw(&v).unwrap()
    }

    fn meta() -> GalleryMeta {
        GalleryMeta { fingerprint: "abc".into(), aug: AugmentParams::default(), seed: 7, n_aug: 0 }
    }

    fn tiny_embedder() -> Embedder<f32> {
        let config =
            EmbedderConfig { encoder: EncoderConfig { in_channels: 3, widths: [2, 3, 4, 5, 6] }, input_size: 32 };
        Embedder::new(config, 0)
    }

    fn products(n: usize) -> Vec<QueryProduct> {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        (0..n)
            .map(|i| QueryProduct {
                label: format!("p{i}"),
                image: RgbImage::from_fn(32, 32, |_, _| image::Rgb([rng.gen(), rng.gen(), rng.gen()])),
            })
            .collect()
    }

    #[test]
    fn entry_counts() {
        let e = tiny_embedder();
        let db = products(3);
        assert_eq!(build_gallery(&db, &e, "f", 0, &AugmentParams::default(), 1).unwrap().len(), 3);
        let g = build_gallery(&db, &e, "f", 4, &AugmentParams::default(), 1).unwrap();
        assert_eq!(g.len(), 15);
        assert!(g.entries().iter().all(|(_, x)| (x.norm() - 1.0).abs() < 1e-6));
        assert!(build_gallery(&[], &e, "f", 4, &AugmentParams::default(), 1).is_err());
    }

    #[test]
    fn rebuilding_is_byte_identical() {
        let e = tiny_embedder();
        let db = products(3);
        let a = build_gallery(&db, &e, "f", 2, &AugmentParams::default(), 5).unwrap();
        let b = build_gallery(&db, &e, "f", 2, &AugmentParams::default(), 5).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn classify_and_topk_agree_with_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let entries: Vec<(String, Embedding)> =
                (0..10).map(|i| (format!("l{}", i % 5), random_unit(&mut rng, 6))).collect();
            let index = GalleryIndex::new(meta(), entries.clone()).unwrap();
            let q = random_unit(&mut rng, 6);
            let scan = entries
                .iter()
                .map(|(l, x)| (l.clone(), q.squared_distance(x)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .unwrap();
            assert_eq!(classify(&q, &index), scan);
            let top = topk(&q, &index, 3);
            assert_eq!(top.len(), 3);
            assert_eq!(top[0], classify(&q, &index));
            assert!(top.windows(2).all(|w| w[0].1 <= w[1].1));
            assert_eq!(topk(&q, &index, 50).len(), 5);
        }
    }

    #[test]
    fn exact_match_has_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_unit(&mut rng, 4);
        let b = random_unit(&mut rng, 4);
        let index = GalleryIndex::new(meta(), vec![("b".into(), b), ("a".into(), a.clone())]).unwrap();
        assert_eq!(classify(&a, &index), ("a".to_string(), 0.0));
    }

    #[test]
    fn distance_ties_prefer_smaller_label() {
        let a = Embedding::from_raw(&[1.0, 0.0]).unwrap();
        let index = GalleryIndex::new(meta(), vec![("z".into(), a.clone()), ("m".into(), a.clone())]).unwrap();
        assert_eq!(classify(&a, &index).0, "m");
        assert_eq!(topk(&a, &index, 2)[0].0, "m");
    }

    #[test]
    fn roundtrip_and_corruption() {
        let e = tiny_embedder();
        let g = build_gallery(&products(3), &e, "deadbeef", 4, &AugmentParams::default(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.idx");
        save_index(&g, &path).unwrap();
        assert_eq!(load_index(&path).unwrap(), g);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[40] ^= 1;
        assert!(matches!(GalleryIndex::from_bytes(&bytes), Err(Error::Corrupt { .. })));
        assert!(matches!(GalleryIndex::from_bytes(&bytes[..bytes.len() / 2]), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn stale_fingerprint_is_reported() {
        let e = tiny_embedder();
        let g = build_gallery(&products(2), &e, "preset-a", 0, &AugmentParams::default(), 0).unwrap();
        assert!(g.verify_fingerprint("preset-a").is_ok());
        assert!(matches!(g.verify_fingerprint("preset-b"), Err(Error::StaleGallery { .. })));
    }
}
