//! Reading configs, kernels and reports from disk.

use std::fs::File;
use std::path::Path;

use steinpair::core_operator::{generator_from_csv, generator_from_json, Generator};
use steinpair::ustat::{BaseMeasure, SymKernel, Tensor};
use steinpair::{Error, Result};

pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

/// JSON when the extension says so, CSV otherwise.
pub fn generator(path: &Path) -> Result<Generator> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        generator_from_json(&read_text(path)?)
    } else {
        generator_from_csv(open(path)?)
    }
}

/// Comma-separated numbers inline, or the first column of a CSV file.
pub fn numbers(spec: &str) -> Result<Vec<f64>> {
    let path = Path::new(spec);
    let fields: Vec<String> = if path.is_file() {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(open(path)?);
        let mut out = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            out.extend(rec.iter().filter(|f| !f.is_empty()).map(str::to_string));
        }
        out
    } else {
        spec.split(',').map(|s| s.trim().to_string()).collect()
    };
    fields.iter().map(|f| f.parse::<f64>().map_err(|_| Error::Invalid(format!("bad number {f:?}")))).collect()
}

/// Builtin kernel names.
pub const BUILTIN_KERNELS: [&str; 3] = ["coincidence", "coincidence3", "product"];

/// A builtin kernel or a tensor CSV, symmetrized.
pub fn ustat_kernel(spec: &str, alphabet: Option<usize>, nu: Option<&str>) -> Result<(BaseMeasure, SymKernel)> {
    let measure = |s: usize| -> Result<BaseMeasure> {
        match nu {
            Some(text) => {
                let w = numbers(text)?;
                if w.len() != s {
                    return Err(Error::DimensionMismatch { expected: s, got: w.len() });
                }
                BaseMeasure::new(w)
            }
            None => BaseMeasure::uniform(s),
        }
    };
    let alphabet_from_nu = || -> Result<Option<usize>> { nu.map(|t| numbers(t).map(|w| w.len())).transpose() };
    if BUILTIN_KERNELS.contains(&spec) {
        let s = match alphabet {
            Some(s) => s,
            None => alphabet_from_nu()?.ok_or_else(|| Error::Invalid("builtin kernels need --alphabet or --nu".into()))?,
        };
        let mu = measure(s)?;
        let kernel = match spec {
            "coincidence" => SymKernel::from_fn(mu.clone(), 2, |x| f64::from(u8::from(x[0] == x[1]))),
            "coincidence3" => SymKernel::from_fn(mu.clone(), 3, |x| f64::from(u8::from(x[0] == x[1] && x[1] == x[2]))),
            _ => SymKernel::from_fn(mu.clone(), 2, |x| (x[0] * x[1]) as f64),
        }?;
        return Ok((mu, kernel));
    }
    let path = Path::new(spec);
    if !path.is_file() {
        return Err(Error::Invalid(format!("kernel {spec:?} is neither a builtin ({}) nor a file", BUILTIN_KERNELS.join(", "))));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(open(path)?);
    let mut entries: Vec<(Vec<usize>, f64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Invalid("tensor CSV rows need indices and a value".into()));
        }
        let idx: std::result::Result<Vec<usize>, _> = rec.iter().take(rec.len() - 1).map(str::parse::<usize>).collect();
        let value = rec[rec.len() - 1].parse::<f64>();
        match (idx, value) {
            (Ok(i), Ok(v)) => entries.push((i, v)),
            _ if entries.is_empty() => continue,
            _ => return Err(Error::Invalid(format!("bad tensor CSV row {:?}", rec.iter().collect::<Vec<_>>()))),
        }
    }
    let order = entries.first().map(|e| e.0.len()).ok_or_else(|| Error::Invalid("tensor CSV is empty".into()))?;
    let inferred = entries.iter().flat_map(|e| e.0.iter().copied()).max().unwrap_or(0) + 1;
    let s = alphabet.or(alphabet_from_nu()?).unwrap_or(inferred);
    if inferred > s {
        return Err(Error::Invalid(format!("tensor index {} exceeds alphabet size {s}", inferred - 1)));
    }
    let mu = measure(s)?;
    let mut values = vec![0.0; s.pow(order as u32)];
    for (idx, v) in entries {
        if idx.len() != order {
            return Err(Error::DimensionMismatch { expected: order, got: idx.len() });
        }
        values[idx.iter().fold(0, |acc, &i| acc * s + i)] = v;
    }
    let kernel = Tensor::new(mu.clone(), order, values)?.symmetrize()?;
    Ok((mu, kernel))
}

/// Total of a bound report, also when wrapped in a CLI envelope.
pub fn bound_total(value: &serde_json::Value) -> Option<f64> {
    if let (Some(t), Some(_)) = (value.get("total").and_then(|t| t.as_f64()), value.get("variant")) {
        return Some(t);
    }
    ["result", "bound"].iter().find_map(|k| value.get(*k).and_then(bound_total))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_total_unwraps_envelopes() {
        let v: serde_json::Value = serde_json::json!({"result": {"bound": {"variant": "x", "total": 0.25}}});
        assert_eq!(bound_total(&v), Some(0.25));
        assert_eq!(bound_total(&serde_json::json!({"variant": "x", "total": 1.5})), Some(1.5));
        assert_eq!(bound_total(&serde_json::json!({"total": 1.5})), None);
    }

    #[test]
    fn inline_numbers() {
        assert_eq!(numbers("0.25, 0.75").unwrap(), vec![0.25, 0.75]);
        assert!(numbers("0.25,x").is_err());
    }

    #[test]
    fn builtin_kernels_need_an_alphabet() {
        assert!(ustat_kernel("coincidence", None, None).is_err());
        let (mu, k) = ustat_kernel("coincidence", None, Some("0.5,0.5")).unwrap();
        assert_eq!(mu.size(), 2);
        assert_eq!(k.tensor().order(), 2);
    }
}
