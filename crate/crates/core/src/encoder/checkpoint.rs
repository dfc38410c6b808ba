use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::container::{Container, ContainerError};
use crate::params::ParameterSet;

use super::{Encoder, EncoderConfig, EncoderError};

const KIND: &str = "encoder";

impl From<ContainerError> for EncoderError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::Io(io) => EncoderError::Io(io),
            other => EncoderError::Format(other.to_string()),
        }
    }
}

/// Writes the config echo and every parameter (in layout order).
pub fn write_checkpoint<W: Write>(encoder: &Encoder, w: W) -> Result<(), EncoderError> {
    let tensors = encoder
        .config
        .layout()
        .into_iter()
        .map(|(name, _)| {
            let t = encoder.params.get(&name).cloned().ok_or_else(|| {
                EncoderError::LayoutMismatch(format!("missing `{name}`"))
            })?;
            Ok((name, t))
        })
        .collect::<Result<Vec<_>, EncoderError>>()?;
    let meta = serde_json::json!({ "config": encoder.config });
    Container {
        kind: KIND.into(),
        meta,
        tensors,
    }
    .write_to(w)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Encoder, EncoderError> {
    let c = Container::read_from(r)?;
    c.expect_kind(KIND)?;
    let config: EncoderConfig = serde_json::from_value(c.meta["config"].clone())
        .map_err(|e| EncoderError::Format(format!("config echo: {e}")))?;
    let mut params = ParameterSet::new();
    for (name, t) in c.tensors {
        params.insert(name, t);
    }
    Encoder::from_parts(config, params)
}

pub fn save_checkpoint(encoder: &Encoder, path: impl AsRef<Path>) -> Result<(), EncoderError> {
    write_checkpoint(encoder, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Encoder, EncoderError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let enc = Encoder::new(EncoderConfig::default(), 11).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&enc, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, enc);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let enc = Encoder::new(EncoderConfig::default(), 11).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&enc, &mut buf).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(matches!(read_checkpoint(&buf[..]), Err(EncoderError::Format(_))));
    }
}
