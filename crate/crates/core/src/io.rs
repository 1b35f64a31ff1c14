//! Model file format.
//!
//! ```text
//! bytes 0..8   magic "FLPM0001"
//! u32 LE       number of dense layers L
//! (L+1) x u32  layer widths: input, hidden.., n_classes
//! P x f64 LE   flat parameters, P = sum (fan_in + 1) * fan_out
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParameterVector};

pub const MODEL_MAGIC: &[u8; 8] = b"FLPM0001";

pub fn write_model<W: Write>(mut out: W, spec: &ModelSpec, params: &ParameterVector) -> Result<()> {
    if params.len() != spec.parameter_count() {
        return Err(Error::DimensionMismatch {
            expected: spec.parameter_count(),
            found: params.len(),
        });
    }
    let dims = spec.layer_dims();
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&((dims.len() - 1) as u32).to_le_bytes())?;
    for d in dims {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in params.as_slice() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input
        .read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_model<R: Read>(mut input: R) -> Result<(ModelSpec, ParameterVector)> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("file shorter than the magic".into()))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let layers = read_u32(&mut input)? as usize;
    if layers == 0 || layers > 1024 {
        return Err(Error::Format(format!("implausible layer count {layers}")));
    }
    let dims = (0..=layers)
        .map(|_| read_u32(&mut input).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let spec = ModelSpec::new(dims[0], dims[1..layers].to_vec(), dims[layers])
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    let expected = spec.parameter_count() * 8;
    if body.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} parameter bytes, found {}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((spec, ParameterVector::try_from_vec(values)?))
}

pub fn save_model(path: &Path, spec: &ModelSpec, params: &ParameterVector) -> Result<()> {
    write_model(BufWriter::new(File::create(path)?), spec, params)
}

pub fn load_model(path: &Path) -> Result<(ModelSpec, ParameterVector)> {
    read_model(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn header_layout() {
        let spec = ModelSpec::new(2, vec![3], 2).unwrap();
        let params = init_params(&spec, 1);
        let mut buf = Vec::new();
        write_model(&mut buf, &spec, &params).unwrap();
        assert_eq!(&buf[..8], b"FLPM0001");
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..24], &[2, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(buf.len(), 24 + 17 * 8);
        assert_eq!(read_model(&buf[..]).unwrap(), (spec, params));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let spec = ModelSpec::logistic(2, 2).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &spec, &ParameterVector::zeros(6)).unwrap();
        assert!(read_model(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_model(&bad[..]).is_err());
        assert!(read_model(&buf[..10]).is_err());
        assert!(write_model(Vec::new(), &spec, &ParameterVector::zeros(5)).is_err());
    }
}
