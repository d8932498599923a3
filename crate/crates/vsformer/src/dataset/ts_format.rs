//! Reader and writer for the UEA `.ts` text format: `@`-prefixed header
//! directives, then `@data`, then one line per instance with `:`-separated
//! dimensions of comma-separated values and the class label last.

use super::{DatasetError, MtsDataset, MtsInstance};
use std::path::Path;

#[derive(Default)]
struct Header {
    dimensions: Option<usize>,
    univariate: Option<bool>,
    equal_length: Option<bool>,
    series_length: Option<usize>,
    class_labels: Option<Vec<String>>,
}

pub fn parse_ts(path: impl AsRef<Path>) -> Result<MtsDataset, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    parse_ts_str(&text)
}

pub fn parse_ts_str(text: &str) -> Result<MtsDataset, DatasetError> {
    let mut header = Header::default();
    let mut lines = text.lines().enumerate();
    let mut data_started = false;

    for (idx, raw) in lines.by_ref() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(directive) = line.strip_prefix('@') {
            let mut parts = directive.split_whitespace();
            let name = parts.next().unwrap_or("").to_ascii_lowercase();
            let rest: Vec<&str> = parts.collect();
            match name.as_str() {
                "data" => {
                    data_started = true;
                    break;
                }
                "dimensions" => {
                    header.dimensions = Some(parse_header_value(line_no, &rest, "dimensions")?);
                }
                "univariate" => {
                    header.univariate = Some(parse_header_bool(line_no, &rest, "univariate")?);
                }
                "equallength" => {
                    header.equal_length = Some(parse_header_bool(line_no, &rest, "equalLength")?);
                }
                "serieslength" => {
                    header.series_length = Some(parse_header_value(line_no, &rest, "seriesLength")?);
                }
                "classlabel" => {
                    let has = parse_header_bool(line_no, &rest[..1.min(rest.len())], "classLabel")?;
                    if !has {
                        return Err(DatasetError::ClassLabelRequired);
                    }
                    if rest.len() < 2 {
                        return Err(DatasetError::MalformedHeader {
                            line: line_no,
                            detail: "@classLabel true requires a vocabulary".into(),
                        });
                    }
                    header.class_labels = Some(rest[1..].iter().map(|s| s.to_string()).collect());
                }
                // problemName, timeStamps, missing, etc. carry no structure we need
                _ => {}
            }
        } else {
            return Err(DatasetError::MalformedHeader {
                line: line_no,
                detail: format!("expected @directive before @data, got {line:?}"),
            });
        }
    }

    if !data_started {
        return Err(DatasetError::EmptyData);
    }
    let class_names = header.class_labels.ok_or(DatasetError::ClassLabelRequired)?;
    let mut expected_dims = header.dimensions.or(match header.univariate {
        Some(true) => Some(1),
        _ => None,
    });

    // Raw series with missing values still marked; interpolation and length
    // padding happen after the whole file is read.
    struct RawInstance {
        line: usize,
        dims: Vec<Vec<Option<f64>>>,
        label: usize,
    }
    let mut raw_instances: Vec<RawInstance> = Vec::new();

    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields: Vec<&str> = line.split(':').collect();
        let label_token = fields
            .pop()
            .ok_or(DatasetError::MalformedHeader {
                line: line_no,
                detail: "empty data line".into(),
            })?
            .trim();
        let label = class_names
            .iter()
            .position(|c| c == label_token)
            .ok_or_else(|| DatasetError::UnknownLabel {
                line: line_no,
                label: label_token.to_string(),
            })?;

        let expected = *expected_dims.get_or_insert(fields.len());
        if fields.len() != expected {
            return Err(DatasetError::DimensionCount {
                line: line_no,
                expected,
                found: fields.len(),
            });
        }

        let mut dims = Vec::with_capacity(fields.len());
        for field in fields {
            let mut series = Vec::new();
            for token in field.split(',') {
                let token = token.trim();
                if token == "?" || token.eq_ignore_ascii_case("nan") {
                    series.push(None);
                } else {
                    let v: f64 = token.parse().map_err(|_| DatasetError::BadValue {
                        line: line_no,
                        token: token.to_string(),
                    })?;
                    series.push(Some(v));
                }
            }
            dims.push(series);
        }
        raw_instances.push(RawInstance {
            line: line_no,
            dims,
            label,
        });
    }

    if raw_instances.is_empty() {
        return Err(DatasetError::EmptyData);
    }

    // Length checks before padding.
    let declared_len = header.series_length;
    let equal_length = header.equal_length.unwrap_or(false);
    let max_len = raw_instances
        .iter()
        .flat_map(|r| r.dims.iter().map(|d| d.len()))
        .max()
        .unwrap_or(0);
    if equal_length {
        let expected = declared_len.unwrap_or(max_len);
        for r in &raw_instances {
            for d in &r.dims {
                if d.len() != expected {
                    return Err(DatasetError::UnequalLength {
                        line: r.line,
                        expected,
                        found: d.len(),
                    });
                }
            }
        }
    }

    let mut instances = Vec::with_capacity(raw_instances.len());
    for r in raw_instances {
        let mut values = Vec::with_capacity(r.dims.len());
        for (dim_idx, d) in r.dims.iter().enumerate() {
            let mut series = interpolate_missing(d).ok_or(DatasetError::AllMissing {
                line: r.line,
                dimension: dim_idx,
            })?;
            // unequal-length corpora: pad at the tail with the last value
            let last = *series.last().expect("non-empty after interpolation");
            series.resize(max_len, last);
            values.push(series);
        }
        instances.push(MtsInstance {
            values,
            label: r.label,
        });
    }

    MtsDataset::new(instances, class_names)
}

/// Linear interpolation over interior gaps; edge gaps take the nearest
/// observed value. Returns None when nothing was observed at all.
fn interpolate_missing(series: &[Option<f64>]) -> Option<Vec<f64>> {
    if series.is_empty() || series.iter().all(|v| v.is_none()) {
        return None;
    }
    let n = series.len();
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        if let Some(v) = series[i] {
            out[i] = v;
            i += 1;
            continue;
        }
        // gap [i, j)
        let mut j = i;
        while j < n && series[j].is_none() {
            j += 1;
        }
        let prev = if i > 0 { Some(out[i - 1]) } else { None };
        let next = if j < n { series[j] } else { None };
        for (offset, slot) in out[i..j].iter_mut().enumerate() {
            *slot = match (prev, next) {
                (Some(p), Some(q)) => {
                    let span = (j - i + 1) as f64;
                    p + (q - p) * (offset + 1) as f64 / span
                }
                (Some(p), None) => p,
                (None, Some(q)) => q,
                (None, None) => unreachable!("all-missing handled above"),
            };
        }
        i = j;
    }
    Some(out)
}

fn parse_header_value(line: usize, rest: &[&str], name: &str) -> Result<usize, DatasetError> {
    rest.first()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| DatasetError::MalformedHeader {
            line,
            detail: format!("@{name} requires a positive integer"),
        })
}

fn parse_header_bool(line: usize, rest: &[&str], name: &str) -> Result<bool, DatasetError> {
    match rest.first().map(|s| s.to_ascii_lowercase()).as_deref() {
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        _ => Err(DatasetError::MalformedHeader {
            line,
            detail: format!("@{name} requires true or false"),
        }),
    }
}

pub fn to_ts_string(dataset: &MtsDataset) -> String {
    let mut out = String::new();
    out.push_str("@problemName exported\n");
    out.push_str("@timeStamps false\n");
    out.push_str("@missing false\n");
    out.push_str(&format!(
        "@univariate {}\n",
        dataset.n_variables() == 1
    ));
    out.push_str(&format!("@dimensions {}\n", dataset.n_variables()));
    out.push_str("@equalLength true\n");
    out.push_str(&format!("@seriesLength {}\n", dataset.series_len()));
    out.push_str(&format!(
        "@classLabel true {}\n",
        dataset.class_names().join(" ")
    ));
    out.push_str("@data\n");
    for inst in dataset.instances() {
        let dims: Vec<String> = inst
            .values
            .iter()
            .map(|series| {
                series
                    .iter()
                    .map(|v| format!("{v}"))
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        out.push_str(&format!(
            "{}:{}\n",
            dims.join(":"),
            dataset.class_names()[inst.label]
        ));
    }
    out
}

pub fn write_ts(dataset: &MtsDataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    std::fs::write(path, to_ts_string(dataset))?;
    Ok(())
}
