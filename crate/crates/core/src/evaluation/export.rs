use std::path::Path;

use crate::error::Result;
use crate::format::{fmt_f64, write_file};
use crate::linalg::{spectral_norm, Matrix};
use crate::model::RuntimeModel;

/// Spectral norm of `F_j = sum_t vs_t vg_t^T` for every platform.
pub fn interference_norms(model: &RuntimeModel) -> Vec<f64> {
    let emb = model.embeddings();
    let r = model.config.embed_dim;
    (0..model.n_platforms())
        .map(|j| {
            let mut f = Matrix::zeros(r, r);
            for t in 0..model.config.interference_types {
                let (vs, vg) = (emb.susceptibility(j, t), emb.magnitude(j, t));
                for a in 0..r {
                    for b in 0..r {
                        f[(a, b)] += vs[a] * vg[b];
                    }
                }
            }
            spectral_norm(&f)
        })
        .collect()
}

fn write_csv(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| crate::error::Error::io(path, e.into_error()))?;
    write_file(path, &bytes)
}

fn entity_name(names: Option<&[String]>, index: usize) -> String {
    names.map_or_else(|| index.to_string(), |n| n[index].clone())
}

/// Write `workload_embeddings.csv`, `platform_embeddings.csv` and
/// `interference_norms.csv` into `dir`. Rows are labelled by name when names
/// are given, otherwise by index.
pub fn export_embeddings(
    model: &RuntimeModel,
    dir: impl AsRef<Path>,
    workload_names: Option<&[String]>,
    platform_names: Option<&[String]>,
) -> Result<()> {
    let dir = dir.as_ref();
    let emb = model.embeddings();
    let (r, s) = (model.config.embed_dim, model.config.interference_types);
    let number = |row: &[f64]| row.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>();

    let mut header = vec!["workload".to_string()];
    for h in 0..model.heads() {
        header.extend((0..r).map(|c| format!("h{h}_{c}")));
    }
    write_csv(
        &dir.join("workload_embeddings.csv"),
        &header,
        (0..model.n_workloads()).map(|i| {
            let mut row = vec![entity_name(workload_names, i)];
            row.extend(number(emb.workload.row(i)));
            row
        }),
    )?;

    let mut header = vec!["platform".to_string()];
    header.extend((0..r).map(|c| format!("p_{c}")));
    for prefix in ["vs", "vg"] {
        for t in 0..s {
            header.extend((0..r).map(|c| format!("{prefix}{t}_{c}")));
        }
    }
    write_csv(
        &dir.join("platform_embeddings.csv"),
        &header,
        (0..model.n_platforms()).map(|j| {
            let mut row = vec![entity_name(platform_names, j)];
            row.extend(number(emb.platform.row(j)));
            row
        }),
    )?;

    let norms = interference_norms(model);
    write_csv(
        &dir.join("interference_norms.csv"),
        &["platform".to_string(), "spectral_norm".to_string()],
        norms
            .iter()
            .enumerate()
            .map(|(j, &n)| vec![entity_name(platform_names, j), fmt_f64(n)]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::BaselineModel;
    use crate::linalg::norm2;
    use crate::model::{init_model, NetworkConfig};

    fn model(s: usize) -> RuntimeModel {
        let cfg = NetworkConfig {
            hidden_sizes: vec![5],
            embed_dim: 3,
            interference_types: s,
            quantiles: vec![0.5, 0.9],
            ..NetworkConfig::default()
        };
        let w = Matrix::from_vec(4, 2, (0..8).map(|k| k as f64 * 0.3).collect());
        let p = Matrix::from_vec(3, 1, vec![1.0, -1.0, 0.5]);
        init_model(cfg, w, p, BaselineModel::zeros(4, 3), 4).unwrap()
    }

    #[test]
    fn no_interference_types_give_zero_norms() {
        assert!(interference_norms(&model(0)).iter().all(|&n| n == 0.0));
    }

    #[test]
    fn single_type_norm_is_product_of_norms() {
        let m = model(1);
        let emb = m.embeddings();
        for (j, n) in interference_norms(&m).into_iter().enumerate() {
            let expected = norm2(emb.susceptibility(j, 0)) * norm2(emb.magnitude(j, 0));
            assert!((n - expected).abs() <= 1e-12 * expected, "{n} vs {expected}");
        }
    }

    #[test]
    fn csv_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(2);
        let names: Vec<String> = (0..3).map(|j| format!("dev,{j}")).collect();
        export_embeddings(&m, dir.path(), None, Some(&names)).unwrap();
        let w = std::fs::read_to_string(dir.path().join("workload_embeddings.csv")).unwrap();
        assert_eq!(w.lines().count(), 5);
        assert_eq!(w.lines().next().unwrap().split(',').count(), 1 + 2 * 3);
        let p = std::fs::read_to_string(dir.path().join("platform_embeddings.csv")).unwrap();
        assert_eq!(p.lines().next().unwrap().split(',').count(), 1 + 3 * 5);
        let n = std::fs::read_to_string(dir.path().join("interference_norms.csv")).unwrap();
        assert!(n.lines().nth(1).unwrap().starts_with("\"dev,0\","));
    }
}
