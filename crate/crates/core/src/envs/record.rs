use std::io::{self, Write};

/// One transition with its predictable/residual split.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub s_hat: Vec<f64>,
    pub nu: Vec<f64>,
    pub done: bool,
}

/// `ν = s' − ŝ`, nudged by at most a few ulps per component so that the
/// floating-point sum `ŝ + ν` reproduces `s'` exactly whenever some double
/// does (always the case for states of comparable magnitude).
pub fn residual(s_next: &[f64], s_hat: &[f64]) -> Vec<f64> {
    s_next
        .iter()
        .zip(s_hat)
        .map(|(&target, &base)| {
            let mut nu = target - base;
            for _ in 0..8 {
                let got = base + nu;
                if got == target || !got.is_finite() {
                    break;
                }
                nu = if got < target {
                    nu.next_up()
                } else {
                    nu.next_down()
                };
            }
            nu
        })
        .collect()
}

/// Writes `episode,t,s…,a…,r,s_hat…,nu…,done`, one row per step.
pub fn write_trajectory_csv<W: Write>(
    mut out: W,
    episodes: &[(usize, Vec<StepRecord>)],
) -> io::Result<()> {
    let Some(first) = episodes.iter().flat_map(|(_, e)| e.first()).next() else {
        return writeln!(out, "episode,t,r,done");
    };
    let (ds, da) = (first.s.len(), first.a.len());
    let mut header = vec!["episode".to_string(), "t".to_string()];
    header.extend((0..ds).map(|i| format!("s{i}")));
    header.extend((0..da).map(|i| format!("a{i}")));
    header.push("r".into());
    header.extend((0..ds).map(|i| format!("s_hat{i}")));
    header.extend((0..ds).map(|i| format!("nu{i}")));
    header.push("done".into());
    writeln!(out, "{}", header.join(","))?;
    for (ep, steps) in episodes {
        for (t, rec) in steps.iter().enumerate() {
            let mut row = vec![ep.to_string(), t.to_string()];
            row.extend(rec.s.iter().map(f64::to_string));
            row.extend(rec.a.iter().map(f64::to_string));
            row.push(rec.r.to_string());
            row.extend(rec.s_hat.iter().map(f64::to_string));
            row.extend(rec.nu.iter().map(f64::to_string));
            row.push(u8::from(rec.done).to_string());
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}
