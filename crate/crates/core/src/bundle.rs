//! Versioned single-file model bundle.
//!
//! Layout (little-endian): the magic `GLYPHBM1`, `u32` format version, `u32`
//! section count, then per section a `u32` name length, the UTF-8 name, a
//! `u64` payload length and the payload. Sections:
//!
//! * `meta`: `key=value` lines describing the architecture
//! * `param:<name>`: `u64` rank, `u64` dims, raw `f64` values
//! * `ngram` (optional): [`NgramModel::to_bytes`]
//! * `lexicon` (optional): one word per line

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::alphabet::Alphabet;
use crate::decoder::AttentionMode;
use crate::encoder::{ConvSpec, EncoderConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Params};
use crate::ngram::NgramModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GLYPHBM1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub model: Model,
    pub lm: Option<NgramModel>,
    pub lexicon: Option<Vec<String>>,
}

impl ModelBundle {
    pub fn new(model: Model) -> Self {
        ModelBundle {
            model,
            lm: None,
            lexicon: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<(String, Vec<u8>)> = vec![("meta".into(), meta_text(&self.model.config).into_bytes())];
        for (_, name, t) in self.model.params.named() {
            sections.push((format!("param:{name}"), tensor_bytes(t)));
        }
        if let Some(lm) = &self.lm {
            sections.push(("ngram".into(), lm.to_bytes()));
        }
        if let Some(words) = &self.lexicon {
            sections.push(("lexicon".into(), words.iter().map(|w| format!("{w}\n")).collect::<String>().into_bytes()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, payload) in sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("not a model bundle (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported bundle version {version} (this build reads version {FORMAT_VERSION})"
            )));
        }
        let count = r.u32()?;
        let mut sections: BTreeMap<String, &[u8]> = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format("section name is not UTF-8"))?
                .to_string();
            let plen = r.u64()? as usize;
            let payload = r.take(plen)?;
            if sections.insert(name.clone(), payload).is_some() {
                return Err(Error::format(format!("duplicate section {name:?}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format("trailing bytes after the last section"));
        }

        let meta = sections.remove("meta").ok_or_else(|| Error::format("missing meta section"))?;
        let config = parse_meta(std::str::from_utf8(meta).map_err(|_| Error::format("meta is not UTF-8"))?)?;
        let mut params = Params::zeros(&config);
        let names: Vec<String> = params.named().into_iter().map(|(_, n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let key = format!("param:{name}");
            let payload = sections.remove(&key).ok_or_else(|| Error::format(format!("missing section {key:?}")))?;
            let t = parse_tensor(payload)?;
            if t.shape() != slot.shape() {
                return Err(Error::format(format!(
                    "{key}: stored shape {:?} but the architecture needs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        let lm = sections.remove("ngram").map(NgramModel::from_bytes).transpose()?;
        let lexicon = match sections.remove("lexicon") {
            Some(p) => {
                let text = std::str::from_utf8(p).map_err(|_| Error::format("lexicon is not UTF-8"))?;
                Some(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
            }
            None => None,
        };
        if let Some(extra) = sections.keys().next() {
            return Err(Error::format(format!("unknown section {extra:?}")));
        }
        Ok(ModelBundle {
            model: Model { config, params },
            lm,
            lexicon,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn meta_text(c: &ModelConfig) -> String {
    let layers: Vec<String> = c.encoder.layers.iter().map(layer_text).collect();
    let mode = match c.mode {
        AttentionMode::Soft => "soft",
        AttentionMode::FirstStepOnly => "first-step",
    };
    format!(
        "alphabet={}\ninput_height={}\nlayers={}\nattention_dim={}\nhidden_dim={}\nembed_dim={}\nmode={}\n",
        Alphabet.symbols(),
        c.encoder.input_height,
        layers.join(";"),
        c.attention_dim,
        c.hidden_dim,
        c.embed_dim,
        mode
    )
}

/// `<channels>/<stride>/<padding>/<pool>`, e.g. `32/1x2/0/2x2` or `64/1x1/0/-`.
pub fn layer_text(l: &ConvSpec) -> String {
    let pool = l.pool.map_or("-".to_string(), |(a, b)| format!("{a}x{b}"));
    format!("{}/{}x{}/{}/{}", l.out_channels, l.stride.0, l.stride.1, l.padding, pool)
}

pub fn parse_layer(s: &str) -> Result<ConvSpec> {
    let bad = || Error::format(format!("bad layer spec {s:?}"));
    let pair = |p: &str| -> Result<(usize, usize)> {
        let (a, b) = p.split_once('x').ok_or_else(bad)?;
        Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
    };
    let parts: Vec<&str> = s.split('/').collect();
    if parts.len() != 4 {
        return Err(bad());
    }
    Ok(ConvSpec {
        out_channels: parts[0].parse().map_err(|_| bad())?,
        stride: pair(parts[1])?,
        padding: parts[2].parse().map_err(|_| bad())?,
        pool: if parts[3] == "-" { None } else { Some(pair(parts[3])?) },
    })
}

fn parse_meta(text: &str) -> Result<ModelConfig> {
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::format(format!("bad meta line {line:?}")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::format(format!("meta is missing {k:?}")));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::format(format!("meta {k:?} is not a number"))) };
    if get("alphabet")? != Alphabet.symbols() {
        return Err(Error::format("bundle was written for a different alphabet"));
    }
    let layers = get("layers")?.split(';').map(parse_layer).collect::<Result<Vec<_>>>()?;
    let mode = match get("mode")? {
        "soft" => AttentionMode::Soft,
        "first-step" => AttentionMode::FirstStepOnly,
        other => return Err(Error::format(format!("unknown attention mode {other:?}"))),
    };
    let config = ModelConfig {
        encoder: EncoderConfig {
            input_height: num("input_height")?,
            layers,
        },
        attention_dim: num("attention_dim")?,
        hidden_dim: num("hidden_dim")?,
        embed_dim: num("embed_dim")?,
        mode,
    };
    config.validate().map_err(|e| Error::format(format!("stored architecture is invalid: {e}")))?;
    Ok(config)
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (1 + t.shape().len() + t.len()));
    out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    let ndim = r.u64()? as usize;
    if ndim > 8 {
        return Err(Error::format(format!("tensor rank {ndim} is implausible")));
    }
    let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    if bytes.len() - r.pos != 8 * n {
        return Err(Error::format("tensor payload length does not match its shape"));
    }
    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data).map_err(|e| Error::format(e.to_string()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("bundle is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> ModelBundle {
        let mut b = ModelBundle::new(Model::new(ModelConfig::toy(), 11).unwrap());
        b.lm = Some(NgramModel::fit(&["abc".to_string(), "abd".to_string()], 3, 0.1).unwrap());
        b.lexicon = Some(vec!["abc".into(), "abd".into()]);
        b
    }

    #[test]
    fn round_trip_is_exact() {
        let b = bundle();
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = ModelBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes(), bytes);

        let mut plain = ModelBundle::new(Model::new(ModelConfig::default(), 2).unwrap());
        plain.model.config.mode = AttentionMode::FirstStepOnly;
        assert_eq!(ModelBundle::from_bytes(&plain.to_bytes()).unwrap(), plain);
    }

    #[test]
    fn version_and_corruption_are_rejected() {
        let mut bytes = bundle().to_bytes();
        bytes[8] = 9;
        let err = ModelBundle::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        let bytes = bundle().to_bytes();
        assert!(ModelBundle::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(ModelBundle::from_bytes(b"GLYPHBM2").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ModelBundle::from_bytes(&extra).is_err());
    }

    #[test]
    fn layer_spec_text() {
        for l in EncoderConfig::default().layers {
            assert_eq!(parse_layer(&layer_text(&l)).unwrap(), l);
        }
        assert!(parse_layer("16/1x1/0").is_err());
    }
}
