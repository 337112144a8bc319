//! Binary checkpoint format.
//!
//! ```text
//! "OMDF" | version u32 | header_len u32 | header (JSON) | count u32 |
//! count × { name_len u32 | name | rank u32 | dims u64… | values f32… }
//! ```
//! All integers and floats are little-endian; values are row-major.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{normal_values, Model, ModelConfig, EMBED, HEAD};
use crate::error::{Error, Result};
use crate::tensor::{ParamMap, Tensor};
use crate::templates::Stage;
use crate::vocab::VocabLayout;

pub const MAGIC: &[u8; 4] = b"OMDF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    /// Last stage trained, if any.
    pub stage: Option<Stage>,
    /// Optimizer steps taken in that stage.
    pub steps: usize,
    pub seed: u64,
    /// Human-readable lineage, oldest first.
    #[serde(default)]
    pub history: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: Metadata,
}

#[derive(Serialize, Deserialize)]
struct Header {
    vocab: VocabLayout,
    model: ModelConfig,
    meta: Metadata,
}

impl Checkpoint {
    pub fn new(model: Model, meta: Metadata) -> Self {
        Self { model, meta }
    }

    pub fn layout(&self) -> &VocabLayout {
        &self.model.config.vocab
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            vocab: self.model.config.vocab.clone(),
            model: self.model.config.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.model.params.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(json.len())?.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&len_u32(self.model.params.len())?.to_le_bytes());
        for (name, t) in self.model.params.iter() {
            out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&len_u32(t.shape().len())?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Inconsistent(format!("unreadable header: {e}")))?;
        if header.vocab != header.model.vocab {
            return Err(Error::Inconsistent("header layout differs from the model's layout".into()));
        }
        header.model.validate().map_err(|e| Error::Inconsistent(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut params = ParamMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Inconsistent("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Inconsistent(format!("{name}: implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Inconsistent("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Inconsistent(format!("{name}: dimension overflow")))?;
            let raw = r.take(n.checked_mul(4).ok_or(Error::Truncated)?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if params.contains(&name) {
                return Err(Error::Inconsistent(format!("tensor {name} appears twice")));
            }
            params.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Inconsistent(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        header.model.check_params(&params).map_err(|e| Error::Inconsistent(e.to_string()))?;
        let model = Model::new(header.model, params).map_err(|e| Error::Inconsistent(e.to_string()))?;
        Ok(Self { model, meta: header.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Inconsistent(format!("length {n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}

/// Extends a text/vision checkpoint with `speech_size` speech ids. New
/// embedding rows and head columns are drawn from the initialization
/// distribution; everything else is copied.
pub fn vocab_extension_init(backbone: &Checkpoint, speech_size: usize, seed: u64) -> Result<Checkpoint> {
    let old = &backbone.model.config;
    if old.vocab.speech_size() != 0 {
        return Err(Error::Pipeline("checkpoint vocabulary already has speech tokens".into()));
    }
    let vocab = old.vocab.extend_with_speech(speech_size)?;
    let config = ModelConfig { vocab, ..old.clone() };
    let (d, v0, v1) = (old.dim, old.vocab.total_size(), config.vocab.total_size());
    let added = v1 - v0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = backbone.model.params.clone();

    let embed_std = config.init_std(EMBED).expect("embed has an init scale");
    let mut embed = params.get(EMBED)?.data().to_vec();
    embed.extend(normal_values(&mut rng, added * d, embed_std));
    params.insert(EMBED, Tensor::from_vec(&[v1, d], embed)?);

    let head_std = config.init_std(HEAD).expect("head has an init scale");
    let fresh = normal_values(&mut rng, d * added, head_std);
    let old_head = params.get(HEAD)?;
    let mut head = Vec::with_capacity(d * v1);
    for r in 0..d {
        head.extend_from_slice(old_head.row(r));
        head.extend_from_slice(&fresh[r * added..(r + 1) * added]);
    }
    params.insert(HEAD, Tensor::from_vec(&[d, v1], head)?);

    let mut meta = backbone.meta.clone();
    meta.history.push(format!("extend speech={speech_size} seed={seed}"));
    Ok(Checkpoint { model: Model::new(config, params)?, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Denoiser;
    use rand::Rng;

    fn checkpoint(speech: usize, seed: u64) -> Checkpoint {
        let vocab = VocabLayout::standard(32, 16, speech).unwrap();
        let config = ModelConfig { dim: 8, layers: 1, heads: 2, max_len: 10, seed, vocab };
        let meta = Metadata { stage: Some(Stage::Two), steps: 7, seed, history: vec!["init".into()] };
        Checkpoint::new(Model::init(config).unwrap(), meta)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = checkpoint(8, 3);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(back.model.params.bit_eq(&ck.model.params));
        assert_eq!(back.model.config, ck.model.config);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.omdf");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn distinct_errors_for_distinct_damage() {
        let bytes = checkpoint(0, 1).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::VersionMismatch { found: 9, expected: 1 })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated)));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..2]), Err(Error::Truncated)));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Inconsistent(_))));

        // A tensor whose shape disagrees with the header's configuration.
        let mut ck = checkpoint(0, 1);
        ck.model.params.insert("pos", Tensor::zeros(&[9, 8]));
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Inconsistent(_))));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(Checkpoint::load("/nonexistent/ck.omdf"), Err(Error::Io(_))));
    }

    #[test]
    fn extension_preserves_rows_and_backbone_logits() {
        let base = checkpoint(0, 5);
        let bytes = base.to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        let ext = vocab_extension_init(&loaded, 6, 99).unwrap();
        let (v0, d) = (base.model.vocab_size(), base.model.config.dim);
        assert_eq!(ext.model.vocab_size(), v0 + 6);

        let e0 = base.model.params.get(EMBED).unwrap();
        let e1 = ext.model.params.get(EMBED).unwrap();
        assert_eq!(&e1.data()[..v0 * d], e0.data());
        assert_eq!(e1.rows() - e0.rows(), 6);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let toks: Vec<u32> = (0..6).map(|_| rng.random_range(0..v0 as u32)).collect();
            let a = base.model.logits(&toks).unwrap();
            let b = ext.model.logits(&toks).unwrap();
            for i in 0..toks.len() {
                let (ra, rb) = (&a[i * v0..(i + 1) * v0], &b[i * (v0 + 6)..i * (v0 + 6) + v0]);
                for (x, y) in ra.iter().zip(rb) {
                    assert!((x - y).abs() < 1e-5);
                }
            }
        }
        assert!(vocab_extension_init(&ext, 6, 1).is_err());
    }
}
