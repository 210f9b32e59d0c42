//! Model serialization: a one-line JSON header describing the architecture,
//! followed by the flat parameter vector as little-endian `f64` bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::models::{IntentionModel, TrajectoryMode, TrajectoryModel};
use super::train::FlatParams;
use super::{PredictError, PAIR_FEATURES};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    input_size: usize,
    hidden_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    horizon: Option<usize>,
    count: usize,
}

const FORMAT_INTENTION: &str = "lstm-intention";
const FORMAT_TRAJECTORY: &str = "lstm-trajectory";

fn write_model(path: &Path, header: &Header, params: &[f64]) -> Result<(), PredictError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for v in params {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_model(path: &Path) -> Result<(Header, Vec<f64>), PredictError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(PredictError::InvalidData(
                "model file ends before header terminator".into(),
            ));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 4096 {
            return Err(PredictError::InvalidData("model header too long".into()));
        }
    }
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| PredictError::InvalidData(format!("bad model header: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != 8 * header.count {
        return Err(PredictError::InvalidData(format!(
            "expected {} parameter bytes, found {}",
            8 * header.count,
            payload.len()
        )));
    }
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if params.iter().any(|v| !v.is_finite()) {
        return Err(PredictError::InvalidData(
            "model contains non-finite parameters".into(),
        ));
    }
    Ok((header, params))
}

pub fn save_intention_model(
    path: impl AsRef<Path>,
    model: &IntentionModel,
) -> Result<(), PredictError> {
    let params = model.flat();
    let header = Header {
        format: FORMAT_INTENTION.into(),
        input_size: model.lstm.input_size,
        hidden_size: model.hidden_size(),
        mode: None,
        window: None,
        horizon: None,
        count: params.len(),
    };
    write_model(path.as_ref(), &header, &params)
}

pub fn load_intention_model(path: impl AsRef<Path>) -> Result<IntentionModel, PredictError> {
    let (header, params) = read_model(path.as_ref())?;
    if header.format != FORMAT_INTENTION {
        return Err(PredictError::InvalidData(format!(
            "expected {FORMAT_INTENTION} model, found {}",
            header.format
        )));
    }
    if header.input_size != PAIR_FEATURES {
        return Err(PredictError::InvalidData(format!(
            "intention model input size {} unsupported",
            header.input_size
        )));
    }
    let mut model = IntentionModel::zeros(header.hidden_size)?;
    model.set_flat(&params).map_err(|_| {
        PredictError::InvalidData("parameter count disagrees with architecture".into())
    })?;
    Ok(model)
}

pub fn save_trajectory_model(
    path: impl AsRef<Path>,
    model: &TrajectoryModel,
) -> Result<(), PredictError> {
    let params = model.flat();
    let header = Header {
        format: FORMAT_TRAJECTORY.into(),
        input_size: model.mode.input_size(),
        hidden_size: model.lstm.hidden_size,
        mode: Some(model.mode.name().into()),
        window: Some(model.window),
        horizon: Some(model.horizon),
        count: params.len(),
    };
    write_model(path.as_ref(), &header, &params)
}

pub fn load_trajectory_model(path: impl AsRef<Path>) -> Result<TrajectoryModel, PredictError> {
    let (header, params) = read_model(path.as_ref())?;
    if header.format != FORMAT_TRAJECTORY {
        return Err(PredictError::InvalidData(format!(
            "expected {FORMAT_TRAJECTORY} model, found {}",
            header.format
        )));
    }
    let mode_name = header
        .mode
        .ok_or_else(|| PredictError::InvalidData("trajectory model missing mode".into()))?;
    let mode = TrajectoryMode::from_name(&mode_name)
        .ok_or_else(|| PredictError::InvalidData(format!("unknown mode {mode_name}")))?;
    let window = header
        .window
        .ok_or_else(|| PredictError::InvalidData("trajectory model missing window".into()))?;
    let horizon = header
        .horizon
        .ok_or_else(|| PredictError::InvalidData("trajectory model missing horizon".into()))?;
    if header.input_size != mode.input_size() {
        return Err(PredictError::InvalidData(
            "input size disagrees with mode".into(),
        ));
    }
    let mut model = TrajectoryModel::zeros(mode, window, horizon, header.hidden_size)?;
    model.set_flat(&params).map_err(|_| {
        PredictError::InvalidData("parameter count disagrees with architecture".into())
    })?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Seek;

    #[test]
    fn intention_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("intention.bin");
        let model = IntentionModel::new(7, 123).unwrap();
        save_intention_model(&path, &model).unwrap();
        let back = load_intention_model(&path).unwrap();
        assert_eq!(back.hidden_size(), 7);
        for (a, b) in model.flat().iter().zip(&back.flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn trajectory_roundtrip_preserves_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.bin");
        let model = TrajectoryModel::new(TrajectoryMode::Conditioned, 10, 30, 12, 5).unwrap();
        save_trajectory_model(&path, &model).unwrap();
        let back = load_trajectory_model(&path).unwrap();
        assert_eq!(back.mode, TrajectoryMode::Conditioned);
        assert_eq!(back.window, 10);
        assert_eq!(back.horizon, 30);
        for (a, b) in model.flat().iter().zip(&back.flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let model = IntentionModel::new(4, 0).unwrap();
        save_intention_model(&path, &model).unwrap();
        let full = std::fs::metadata(&path).unwrap().len();
        let f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(full - 8).unwrap();
        assert!(matches!(
            load_intention_model(&path),
            Err(PredictError::InvalidData(_))
        ));
    }

    #[test]
    fn wrong_format_and_nan_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cross.bin");
        let model = TrajectoryModel::new(TrajectoryMode::Plain, 4, 2, 3, 0).unwrap();
        save_trajectory_model(&path, &model).unwrap();
        assert!(load_intention_model(&path).is_err());

        let nan_path = dir.path().join("nan.bin");
        let imodel = IntentionModel::new(3, 1).unwrap();
        save_intention_model(&nan_path, &imodel).unwrap();
        let mut f = std::fs::OpenOptions::new()
            .read(true)
            .write(true)
            .open(&nan_path)
            .unwrap();
        // Overwrite the final parameter with NaN bytes.
        f.seek(std::io::SeekFrom::End(-8)).unwrap();
        f.write_all(&f64::NAN.to_le_bytes()).unwrap();
        drop(f);
        assert!(matches!(
            load_intention_model(&nan_path),
            Err(PredictError::InvalidData(_))
        ));
    }
}
