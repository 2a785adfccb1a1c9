use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dense, Mlp, NetworkConfig, Parameters, RuntimeModel};
use crate::baseline::BaselineModel;
use crate::error::{Error, Result};
use crate::format::to_json_pretty;
use crate::linalg::Matrix;

const FORMAT: &str = "runtime-oracle-model";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    config: NetworkConfig,
    baseline: BaselineModel,
    tensors: Vec<NamedTensor>,
}

fn matrix_tensor(name: String, m: &Matrix) -> NamedTensor {
    NamedTensor {
        name,
        shape: vec![m.rows(), m.cols()],
        data: m.as_slice().to_vec(),
    }
}

fn mlp_tensors(prefix: &str, mlp: &Mlp, out: &mut Vec<NamedTensor>) {
    for (l, layer) in mlp.layers.iter().enumerate() {
        out.push(matrix_tensor(format!("{prefix}.{l}.weight"), &layer.weight));
        out.push(NamedTensor {
            name: format!("{prefix}.{l}.bias"),
            shape: vec![layer.bias.len()],
            data: layer.bias.clone(),
        });
    }
}

impl RuntimeModel {
    pub fn to_json(&self) -> Result<String> {
        let mut tensors = vec![
            matrix_tensor("workload_inputs".into(), &self.workload_inputs),
            matrix_tensor("platform_inputs".into(), &self.platform_inputs),
        ];
        mlp_tensors("workload_net", &self.params.workload_net, &mut tensors);
        mlp_tensors("platform_net", &self.params.platform_net, &mut tensors);
        tensors.push(matrix_tensor("workload_latent".into(), &self.params.workload_latent));
        tensors.push(matrix_tensor("platform_latent".into(), &self.params.platform_latent));
        let file = ModelFile {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            baseline: self.baseline.clone(),
            tensors,
        };
        Ok(to_json_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::validation(format!(
                "unsupported model format {} v{}",
                file.format, file.version
            )));
        }
        file.config.validate()?;
        let mut tensors = file.tensors.into_iter();
        let workload_inputs = take_matrix(&mut tensors, "workload_inputs")?;
        let platform_inputs = take_matrix(&mut tensors, "platform_inputs")?;
        let n_layers = file.config.hidden_sizes.len() + 1;
        let mut nets = Vec::new();
        for prefix in ["workload_net", "platform_net"] {
            let mut layers = Vec::new();
            for l in 0..n_layers {
                let weight = take_matrix(&mut tensors, &format!("{prefix}.{l}.weight"))?;
                let bias = take_vector(&mut tensors, &format!("{prefix}.{l}.bias"), weight.cols())?;
                layers.push(Dense { weight, bias });
            }
            nets.push(Mlp { layers });
        }
        let workload_latent = take_matrix(&mut tensors, "workload_latent")?;
        let platform_latent = take_matrix(&mut tensors, "platform_latent")?;
        if let Some(extra) = tensors.next() {
            return Err(Error::validation(format!("unexpected tensor {}", extra.name)));
        }
        let platform_net = nets.pop().expect("two nets");
        let workload_net = nets.pop().expect("two nets");

        let cfg = &file.config;
        let (nw, np, q) = (workload_inputs.rows(), platform_inputs.rows(), cfg.learned_features);
        let consistent = workload_net.input_dim() == workload_inputs.cols() + q
            && platform_net.input_dim() == platform_inputs.cols() + q
            && workload_net.output_dim() == cfg.workload_output_dim()
            && platform_net.output_dim() == cfg.platform_output_dim()
            && workload_latent.shape() == (nw, q)
            && platform_latent.shape() == (np, q)
            && file.baseline.n_workloads() == nw
            && file.baseline.n_platforms() == np
            && layer_chain_ok(&workload_net)
            && layer_chain_ok(&platform_net);
        if !consistent {
            return Err(Error::validation("model tensors do not match the configuration"));
        }
        Ok(RuntimeModel {
            config: file.config,
            baseline: file.baseline,
            workload_inputs,
            platform_inputs,
            params: Parameters {
                workload_net,
                platform_net,
                workload_latent,
                platform_latent,
            },
        })
    }
}

fn layer_chain_ok(mlp: &Mlp) -> bool {
    mlp.layers.windows(2).all(|w| w[0].fan_out() == w[1].fan_in())
}

fn take_matrix(tensors: &mut impl Iterator<Item = NamedTensor>, name: &str) -> Result<Matrix> {
    let t = tensors
        .next()
        .ok_or_else(|| Error::validation(format!("missing tensor {name}")))?;
    if t.name != name || t.shape.len() != 2 || t.shape[0] * t.shape[1] != t.data.len() {
        return Err(Error::validation(format!(
            "expected 2-d tensor {name}, found {}",
            t.name
        )));
    }
    Ok(Matrix::from_vec(t.shape[0], t.shape[1], t.data))
}

fn take_vector(tensors: &mut impl Iterator<Item = NamedTensor>, name: &str, len: usize) -> Result<Vec<f64>> {
    let t = tensors
        .next()
        .ok_or_else(|| Error::validation(format!("missing tensor {name}")))?;
    if t.name != name || t.shape != [len] || t.data.len() != len {
        return Err(Error::validation(format!("expected 1-d tensor {name} of length {len}")));
    }
    Ok(t.data)
}

pub fn save_model(model: &RuntimeModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    crate::format::write_file(path, model.to_json()?.as_bytes())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<RuntimeModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RuntimeModel::from_json(&text)
}
