//! α grid syntax: `start:stop:step` (stop inclusive) or a comma list.

/// Values are rounded to 12 decimals so `0:1:0.1` yields 0.3 rather than 0.30000000000000004.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, String> {
    let num = |s: &str| -> Result<f64, String> {
        s.trim().parse::<f64>().map_err(|_| format!("`{s}` is not a number"))
    };
    let values = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let [start, stop, step] = parts[..] else {
            return Err(format!("grid `{text}` must be start:stop:step"));
        };
        let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
        if !(step > 0.0) || stop < start {
            return Err(format!("grid `{text}` needs step > 0 and stop ≥ start"));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| round12(start + i as f64 * step)).collect()
    } else {
        text.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if values.is_empty() || values.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(format!("grid `{text}` must contain values in [0, 1]"));
    }
    Ok(values)
}

fn round12(v: f64) -> f64 {
    (v * 1e12).round() / 1e12
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_syntax_is_inclusive() {
        assert_eq!(parse_grid("0:1:0.25").unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(parse_grid("0:1:0.1").unwrap()[3], 0.3);
        assert_eq!(parse_grid("0:1:0.1").unwrap().len(), 11);
        assert_eq!(parse_grid("0.5:0.5:1").unwrap(), vec![0.5]);
        assert_eq!(parse_grid("0:1:0.3").unwrap(), vec![0.0, 0.3, 0.6, 0.9]);
    }

    #[test]
    fn list_syntax() {
        assert_eq!(parse_grid("0, 0.6,1").unwrap(), vec![0.0, 0.6, 1.0]);
    }

    #[test]
    fn rejects_bad_grids() {
        for bad in ["", "0:1", "0:1:0", "1:0:0.1", "0:2:1", "a:1:0.5", "0,x", "-0.1", "0:1:-0.5"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }
}
