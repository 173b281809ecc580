//! `--grid` sweep parsing.

use rdd_core::harness::GridPoint;
use rdd_core::{RemaskPolicy, ScheduleConfig};

use crate::{usage, CliResult};

#[derive(Clone, Debug, PartialEq)]
enum Axis {
    F(Vec<f64>),
    FR(Vec<f64>),
    Lambda(Vec<f64>),
    Budget(Vec<u32>),
    Remask(Vec<RemaskPolicy>),
}

impl Axis {
    fn len(&self) -> usize {
        match self {
            Axis::F(v) | Axis::FR(v) | Axis::Lambda(v) => v.len(),
            Axis::Budget(v) => v.len(),
            Axis::Remask(v) => v.len(),
        }
    }
}

/// `a:b:step` (inclusive) or `v1,v2,...`.
fn numbers(spec: &str) -> CliResult<Vec<f64>> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| usage(format!("bad grid value {s:?}")))
    };
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [a, b, step] => {
            let (a, b, step) = (num(a)?, num(b)?, num(step)?);
            if !(step > 0.0) || b < a {
                return Err(usage(format!("bad grid range {spec:?}")));
            }
            let n = ((b - a) / step + 1e-9).floor() as usize;
            Ok((0..=n).map(|i| a + i as f64 * step).collect())
        }
        [_] => spec.split(',').map(num).collect(),
        _ => Err(usage(format!("bad grid range {spec:?}"))),
    }
}

fn parse_axis(spec: &str) -> CliResult<Axis> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("grid {spec:?} must look like key=values")))?;
    Ok(match key.trim() {
        "f" => Axis::F(numbers(values)?),
        "f_r" | "f-r" => Axis::FR(numbers(values)?),
        "lambda" => Axis::Lambda(numbers(values)?),
        "R" | "rollback_budget" | "rollback-budget" => Axis::Budget(
            numbers(values)?
                .into_iter()
                .map(|v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as u32)
                    } else {
                        Err(usage(format!("rollback budget {v} is not a count")))
                    }
                })
                .collect::<CliResult<_>>()?,
        ),
        "remask" => Axis::Remask(
            values
                .split(',')
                .map(|v| v.trim().parse::<RemaskPolicy>().map_err(Into::into))
                .collect::<CliResult<_>>()?,
        ),
        other => return Err(usage(format!("unknown grid key {other:?}"))),
    })
}

/// Cartesian product of all axes over `base`. Unless `f_r` is pinned
/// (flag or axis), it follows `f`.
pub fn expand(specs: &[String], base: ScheduleConfig, remask: RemaskPolicy, f_r_pinned: bool) -> CliResult<Vec<GridPoint>> {
    let axes: Vec<Axis> = specs.iter().map(|s| parse_axis(s)).collect::<CliResult<_>>()?;
    if axes.iter().any(|a| a.len() == 0) {
        return Err(usage("empty grid axis"));
    }
    let f_r_follows = !f_r_pinned && !axes.iter().any(|a| matches!(a, Axis::FR(_)));
    let mut points = vec![GridPoint {
        schedule: base,
        remask,
    }];
    for axis in &axes {
        let mut next = Vec::with_capacity(points.len() * axis.len());
        for p in &points {
            for i in 0..axis.len() {
                let mut q = p.clone();
                match axis {
                    Axis::F(v) => {
                        q.schedule.f = v[i];
                        if f_r_follows {
                            q.schedule.f_r = v[i];
                        }
                    }
                    Axis::FR(v) => q.schedule.f_r = v[i],
                    Axis::Lambda(v) => q.schedule.lambda = v[i],
                    Axis::Budget(v) => q.schedule.rollback_budget = v[i],
                    Axis::Remask(v) => q.remask = v[i],
                }
                next.push(q);
            }
        }
        points = next;
    }
    for p in &points {
        p.schedule.validate()?;
    }
    Ok(points)
}
