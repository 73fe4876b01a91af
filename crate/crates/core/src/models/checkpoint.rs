//! Plain-text network checkpoints.
//!
//! ```text
//! mlp <L>
//! layer <in> <out> <relu|identity>
//! <out rows of <in> weights>
//! <one line of <out> biases>
//! ...
//! ```
//! Numbers use 17 significant digits, so a round trip is exact.

use std::fmt::Write;

use super::mlp::MlpSpec;
use super::ModelError;

pub fn checkpoint_to_string(spec: &MlpSpec, theta: &[f64]) -> String {
    assert_eq!(theta.len(), spec.num_params(), "checkpoint parameter count");
    let layers = spec.layers();
    let mut out = format!("mlp {}\n", layers.len());
    for (k, ((w_at, b_at), (i, o))) in spec
        .offsets()
        .into_iter()
        .zip(layers.iter().copied())
        .enumerate()
    {
        let act = if k + 1 < layers.len() {
            "relu"
        } else {
            "identity"
        };
        writeln!(out, "layer {i} {o} {act}").unwrap();
        for r in 0..o {
            write_row(&mut out, &theta[w_at + r * i..w_at + (r + 1) * i]);
        }
        write_row(&mut out, &theta[b_at..b_at + o]);
    }
    out
}

fn write_row(out: &mut String, row: &[f64]) {
    let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
    out.push_str(&cells.join(" "));
    out.push('\n');
}

pub fn checkpoint_from_str(text: &str) -> Result<(MlpSpec, Vec<f64>), ModelError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| ModelError::Checkpoint(format!("unexpected end of file, wanted {what}")))
    };
    let bad = |n: usize, msg: String| ModelError::Checkpoint(format!("line {n}: {msg}"));

    let (n, head) = next("header")?;
    let n_layers: usize = head
        .strip_prefix("mlp ")
        .and_then(|v| v.trim().parse().ok())
        .filter(|&l| l > 0)
        .ok_or_else(|| bad(n, format!("expected `mlp <layers>`, got `{head}`")))?;

    let mut dims = Vec::new();
    let mut theta = Vec::new();
    for k in 0..n_layers {
        let (n, line) = next("layer header")?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let (i, o, act) = match parts.as_slice() {
            ["layer", i, o, act] => (
                i.parse::<usize>().map_err(|e| bad(n, e.to_string()))?,
                o.parse::<usize>().map_err(|e| bad(n, e.to_string()))?,
                *act,
            ),
            _ => {
                return Err(bad(
                    n,
                    format!("expected `layer <in> <out> <activation>`, got `{line}`"),
                ))
            }
        };
        let want = if k + 1 < n_layers { "relu" } else { "identity" };
        if act != want {
            return Err(bad(n, format!("activation `{act}`, expected `{want}`")));
        }
        if let Some(&(_, prev_out)) = dims.last() {
            if prev_out != i {
                return Err(bad(
                    n,
                    format!("layer input {i} does not match previous output {prev_out}"),
                ));
            }
        }
        dims.push((i, o));
        for r in 0..=o {
            let (n, row) = next("parameter row")?;
            let width = if r < o { i } else { o };
            let vals = row
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| bad(n, format!("`{v}`: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            if vals.len() != width {
                return Err(bad(n, format!("{} values, expected {width}", vals.len())));
            }
            theta.extend(vals);
        }
    }
    if let Some((n, extra)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(bad(n, format!("trailing content `{extra}`")));
    }
    let hidden: Vec<usize> = dims[..dims.len() - 1].iter().map(|&(_, o)| o).collect();
    let spec = MlpSpec::new(dims[0].0, &hidden, dims[dims.len() - 1].1)?;
    if theta.len() != spec.num_params() {
        return Err(ModelError::Checkpoint(format!(
            "{} values for a network with {} parameters",
            theta.len(),
            spec.num_params()
        )));
    }
    Ok((spec, theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::mlp_init;
    use crate::rng::Seed;

    #[test]
    fn round_trip_is_exact() {
        let spec = MlpSpec::new(4, &[7, 3], 2).unwrap();
        let mut theta = mlp_init(&spec, Seed(1)).into_values();
        theta[0] = 1.0 / 3.0;
        theta[1] = -f64::MIN_POSITIVE;
        theta[2] = 1e300;
        let text = checkpoint_to_string(&spec, &theta);
        let (spec2, theta2) = checkpoint_from_str(&text).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(
            theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            theta2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(checkpoint_to_string(&spec2, &theta2), text);
    }

    #[test]
    fn layout_of_text() {
        let spec = MlpSpec::new(1, &[2], 1).unwrap();
        let text = checkpoint_to_string(&spec, &[1.0, -1.0, -1.5, -1.5, -1.0, 1.0, 0.0]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "mlp 2");
        assert_eq!(lines[1], "layer 1 2 relu");
        assert_eq!(lines[2], "1.0000000000000000e0");
        assert_eq!(lines[4], "-1.5000000000000000e0 -1.5000000000000000e0");
        assert_eq!(lines[5], "layer 2 1 identity");
        assert_eq!(lines.len(), 8);
    }

    #[test]
    fn malformed_input_reports_line() {
        let spec = MlpSpec::new(1, &[2], 1).unwrap();
        let good = checkpoint_to_string(&spec, &[0.0; 7]);
        let broken = good.replacen("layer 2 1 identity", "layer 3 1 identity", 1);
        let err = checkpoint_from_str(&broken).unwrap_err().to_string();
        assert!(err.contains("line 6"), "{err}");
        assert!(checkpoint_from_str("mlp x").is_err());
        let err = checkpoint_from_str(&good.replacen("0.0000000000000000e0", "zz", 1)).unwrap_err();
        assert!(err.to_string().contains("line 3"));
    }
}
