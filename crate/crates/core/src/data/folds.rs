use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Timelike, Utc};
use rand::seq::SliceRandom;
use rand::Rng;

use super::observations::ObservationTable;
use crate::error::{Error, Result};

/// Which folds train the model, which monitor it and which test it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldRoles {
    pub train: Vec<u8>,
    pub eval: u8,
    pub test: u8,
}

impl Default for FoldRoles {
    fn default() -> Self {
        Self {
            train: (1..=8).collect(),
            eval: 9,
            test: 10,
        }
    }
}

fn hour_of(t: &DateTime<Utc>) -> DateTime<Utc> {
    t.with_minute(0)
        .and_then(|t| t.with_second(0))
        .and_then(|t| t.with_nanosecond(0))
        .expect("truncation to the hour is always valid")
}

/// Keeps one uniformly chosen row per (site, truncated hour). Retained rows
/// keep their original order.
pub fn subsample_hourly<R: Rng + ?Sized>(table: &ObservationTable, rng: &mut R) -> ObservationTable {
    let mut groups: BTreeMap<(&str, DateTime<Utc>), Vec<usize>> = BTreeMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        groups.entry((r.site_id.as_str(), hour_of(&r.timestamp))).or_default().push(i);
    }
    let mut keep = vec![false; table.rows.len()];
    for members in groups.values() {
        let pick = if members.len() == 1 {
            members[0]
        } else {
            members[rng.random_range(0..members.len())]
        };
        keep[pick] = true;
    }
    ObservationTable::new(table.rows.iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r.clone()).collect())
}

/// Shuffles the distinct sites and deals them round-robin into folds
/// `1..=k`; every row inherits its site's fold.
pub fn split_folds_by_site<R: Rng + ?Sized>(table: &ObservationTable, k: usize, rng: &mut R) -> Result<ObservationTable> {
    if k < 2 || k > u8::MAX as usize {
        return Err(Error::Folds(format!("k = {k} must be in 2..=255")));
    }
    let mut sites = table.sites();
    if sites.len() < k {
        return Err(Error::Folds(format!("{} sites cannot fill {k} folds", sites.len())));
    }
    sites.shuffle(rng);
    let assignment: HashMap<String, u8> = sites.into_iter().enumerate().map(|(i, s)| (s, (i % k) as u8 + 1)).collect();
    let mut out = table.clone();
    for r in &mut out.rows {
        r.fold = Some(assignment[&r.site_id]);
    }
    Ok(out)
}

/// Site → fold map of a labelled table. Fails if a site spans two folds or
/// a row has no fold.
pub fn fold_map(table: &ObservationTable) -> Result<BTreeMap<String, u8>> {
    let mut map = BTreeMap::new();
    for r in &table.rows {
        let f = r
            .fold
            .ok_or_else(|| Error::Folds(format!("site `{}` has an unassigned row", r.site_id)))?;
        if let Some(prev) = map.insert(r.site_id.clone(), f) {
            if prev != f {
                return Err(Error::Folds(format!("site `{}` appears in folds {prev} and {f}", r.site_id)));
            }
        }
    }
    Ok(map)
}
