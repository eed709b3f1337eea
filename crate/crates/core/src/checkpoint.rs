//! Model checkpoints: the model config as `key=value` text followed by every
//! parameter tensor (name, dims, little-endian `f64` values), inside the
//! checksummed container.

use std::fs;
use std::path::Path;

use crate::config::KvMap;
use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 4] = b"GGCK";
const VERSION: u32 = 1;

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut kv = KvMap::new();
    model.config.to_kv(&mut kv);
    let mut w = Writer::new(MAGIC, VERSION);
    w.str(&kv.render())?;
    let params = model.parameters();
    w.len_u32(params.len())?;
    for (name, p) in model.parameter_names().iter().zip(params) {
        w.str(name)?;
        w.len_u32(p.rank())?;
        for &d in p.shape() {
            w.len_u32(d)?;
        }
        for &v in p.data() {
            w.f64(v);
        }
    }
    Ok(w.finish())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::open(bytes, MAGIC, VERSION, "checkpoint")?;
    let config = ModelConfig::from_kv(&KvMap::parse(&r.str()?)?, &ModelConfig::default())?;
    let mut model = Model::build(config)?;
    let names = model.parameter_names();
    let count = r.usize()?;
    if count != names.len() {
        return Err(Error::Format(format!("checkpoint holds {count} tensors, model has {}", names.len())));
    }
    for (name, p) in names.iter().zip(model.parameters_mut()) {
        let found = r.str()?;
        if &found != name {
            return Err(Error::Format(format!("expected tensor {name}, found {found}")));
        }
        let rank = r.usize()?;
        let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if dims != p.shape() {
            return Err(Error::Format(format!("{name}: stored shape {dims:?}, expected {:?}", p.shape())));
        }
        for v in p.data_mut() {
            *v = r.f64()?;
        }
    }
    r.finish()?;
    model.validate()?;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AblationFlags;

    fn cfg() -> ModelConfig {
        ModelConfig {
            input_rows: 16,
            input_cols: 16,
            backbone_channels: vec![4, 8],
            reduction: 2,
            classes: 3,
            head_hidden: vec![5],
            flags: AblationFlags::BASELINE,
            seed: 11,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = Model::build(cfg()).unwrap();
        m.backbone[0].data_mut()[3] = -0.0;
        m.head[0].bias.data_mut()[1] = f64::MIN_POSITIVE / 4.0;
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        assert!(back.backbone[0].data()[3].is_sign_negative());
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = to_bytes(&Model::build(cfg()).unwrap()).unwrap();
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x10;
        assert!(matches!(from_bytes(&flipped), Err(Error::Checksum(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checksum(_))));
        assert!(matches!(from_bytes(b"GGDS"), Err(Error::Format(_))));
    }
}
