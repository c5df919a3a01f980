//! Model specifications accepted by `--model`.
//!
//! - `oracle` / `stub:oracle` – decodes labels from synthetic content
//! - `stub:mod<k>` – label `(row mod k) mod 3`
//! - `stub:frame0` – oracle that inverts when the frames are swapped
//! - `stub:noisy:<sigma>:<seed>` – oracle plus seeded Gaussian logit noise
//! - `constant:<l0>,<l1>,...` – the same logits everywhere
//! - `exec:<command line>` – external process speaking the framed protocol

use fieldscale::synth::{ConstantModel, StubMode, StubModel, StubModelSpec};
use fieldscale::tiler::exec::ExecModel;
use fieldscale::ModelBackend;

use crate::UsageError;

pub const DEFAULT_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Stub(StubMode),
    Constant(Vec<f32>),
    Exec(String),
}

pub fn parse_model_spec(s: &str) -> Result<ModelSpec, UsageError> {
    let bad = || UsageError(format!("unrecognized model spec `{s}`"));
    if let Some(cmd) = s.strip_prefix("exec:") {
        if cmd.trim().is_empty() {
            return Err(UsageError("exec: model needs a command".into()));
        }
        return Ok(ModelSpec::Exec(cmd.to_string()));
    }
    if let Some(vals) = s.strip_prefix("constant:") {
        let logits = vals
            .split(',')
            .map(|v| v.trim().parse::<f32>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?;
        if logits.len() < 2 {
            return Err(UsageError("constant model needs at least two logits".into()));
        }
        return Ok(ModelSpec::Constant(logits));
    }
    let stub = s.strip_prefix("stub:").unwrap_or(s);
    let parts: Vec<&str> = stub.split(':').collect();
    let mode = match parts.as_slice() {
        ["oracle"] => StubMode::Oracle,
        ["frame0"] => StubMode::Frame0Only,
        [m] if m.starts_with("mod") => StubMode::PositionModK {
            k: m[3..].parse().map_err(|_| bad())?,
        },
        ["noisy", sigma, seed] => StubMode::Noisy {
            sigma: sigma.parse().map_err(|_| bad())?,
            seed: seed.parse().map_err(|_| bad())?,
        },
        ["noisy", sigma] => StubMode::Noisy {
            sigma: sigma.parse().map_err(|_| bad())?,
            seed: 0,
        },
        _ => return Err(bad()),
    };
    Ok(ModelSpec::Stub(mode))
}

/// Instantiates `spec` for inputs with `frames x bands` channels.
pub fn build_model(spec: &ModelSpec, frames: usize, bands: usize, logit_gain: f64) -> anyhow::Result<Box<dyn ModelBackend>> {
    Ok(match spec {
        ModelSpec::Stub(mode) => {
            let spec = StubModelSpec::new(*mode, logit_gain)?;
            Box::new(StubModel::new(spec, frames, bands)?)
        }
        ModelSpec::Constant(logits) => Box::new(ConstantModel::new(logits.clone(), frames * bands)),
        ModelSpec::Exec(cmd) => Box::new(ExecModel::from_command_line(cmd, frames * bands, DEFAULT_CLASSES)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_forms() {
        assert_eq!(parse_model_spec("oracle").unwrap(), ModelSpec::Stub(StubMode::Oracle));
        assert_eq!(parse_model_spec("stub:mod3").unwrap(), ModelSpec::Stub(StubMode::PositionModK { k: 3 }));
        assert_eq!(parse_model_spec("stub:frame0").unwrap(), ModelSpec::Stub(StubMode::Frame0Only));
        assert_eq!(
            parse_model_spec("stub:noisy:0.5:7").unwrap(),
            ModelSpec::Stub(StubMode::Noisy { sigma: 0.5, seed: 7 })
        );
        assert_eq!(parse_model_spec("constant:0,1,0").unwrap(), ModelSpec::Constant(vec![0.0, 1.0, 0.0]));
        assert_eq!(parse_model_spec("exec:python3 m.py").unwrap(), ModelSpec::Exec("python3 m.py".into()));
        assert!(parse_model_spec("unet").is_err());
        assert!(parse_model_spec("stub:modx").is_err());
        assert!(parse_model_spec("constant:1").is_err());
    }
}
