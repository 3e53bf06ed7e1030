//! Railroad network model and the station adjacency used for graph
//! regularization.
//!
//! Track connections always carry weight 1. Unconnected stations closer than
//! `d_max` are linked with a linearly decaying weight `1 - d / d_max`, and
//! everything further away is left out so the matrix stays sparse.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const DEFAULT_D_MAX_KM: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordinateMode {
    /// `(latitude, longitude)` in degrees.
    Geographic,
    /// `(x, y)` in kilometres.
    Planar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Station {
    pub id: usize,
    pub name: String,
    pub position: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct RailNetwork {
    stations: Vec<Station>,
    /// Normalized so that `a < b`.
    connections: BTreeSet<(usize, usize)>,
    mode: CoordinateMode,
}

impl RailNetwork {
    pub fn new(stations: Vec<Station>, mode: CoordinateMode) -> Result<Self> {
        for (idx, st) in stations.iter().enumerate() {
            if st.id != idx {
                return Err(Error::Data(format!(
                    "station ids must be dense and ordered: row {idx} has id {}",
                    st.id
                )));
            }
            if !st.position.0.is_finite() || !st.position.1.is_finite() {
                return Err(Error::Data(format!(
                    "station {} has a non-finite coordinate",
                    st.id
                )));
            }
        }
        Ok(Self {
            stations,
            connections: BTreeSet::new(),
            mode,
        })
    }

    /// Adds an undirected track connection. Repeats are ignored.
    pub fn connect(&mut self, a: usize, b: usize) -> Result<()> {
        self.check_id(a)?;
        self.check_id(b)?;
        if a == b {
            bail_arg!("self-connection on station {a}");
        }
        self.connections.insert((a.min(b), a.max(b)));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn mode(&self) -> CoordinateMode {
        self.mode
    }

    pub fn connections(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.connections.iter().copied()
    }

    pub fn connection_count(&self) -> usize {
        self.connections.len()
    }

    pub fn is_connected(&self, a: usize, b: usize) -> bool {
        self.connections.contains(&(a.min(b), a.max(b)))
    }

    pub fn degree(&self, id: usize) -> usize {
        self.connections
            .iter()
            .filter(|&&(a, b)| a == id || b == id)
            .count()
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.stations.len() {
            bail_arg!(
                "station id {id} out of range (network has {} stations)",
                self.stations.len()
            );
        }
        Ok(())
    }

    /// Straight-line distance in km: great-circle for geographic
    /// coordinates, Euclidean for planar ones.
    pub fn distance(&self, i: usize, j: usize) -> Result<f64> {
        self.check_id(i)?;
        self.check_id(j)?;
        if i == j {
            return Ok(0.0);
        }
        let a = self.stations[i].position;
        let b = self.stations[j].position;
        Ok(match self.mode {
            CoordinateMode::Geographic => haversine_km(a, b),
            CoordinateMode::Planar => ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt(),
        })
    }

    /// Reads `stations.csv` (`id,name,lat,lon` or `id,name,x,y`) and
    /// `edges.csv` (`from_id,to_id`). The coordinate mode follows the header.
    pub fn load_csv(stations: &Path, edges: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(stations)?;
        let headers = rdr.headers()?.clone();
        let cols: Vec<&str> = headers.iter().map(str::trim).collect();
        let mode = match cols.as_slice() {
            ["id", "name", "lat", "lon"] => CoordinateMode::Geographic,
            ["id", "name", "x", "y"] => CoordinateMode::Planar,
            _ => {
                return Err(Error::Data(format!(
                    "{}: expected header id,name,lat,lon or id,name,x,y, got {}",
                    stations.display(),
                    cols.join(",")
                )))
            }
        };
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |k: usize| -> Result<&str> {
                rec.get(k).map(str::trim).ok_or_else(|| {
                    Error::Data(format!("{}: row {} is short", stations.display(), line + 2))
                })
            };
            let parse_f = |k: usize| -> Result<f64> {
                field(k)?.parse::<f64>().map_err(|e| {
                    Error::Data(format!("{}: row {}: {e}", stations.display(), line + 2))
                })
            };
            let id = field(0)?.parse::<usize>().map_err(|e| {
                Error::Data(format!("{}: row {}: {e}", stations.display(), line + 2))
            })?;
            rows.push(Station {
                id,
                name: field(1)?.to_string(),
                position: (parse_f(2)?, parse_f(3)?),
            });
        }
        rows.sort_by_key(|s| s.id);
        let mut network = RailNetwork::new(rows, mode)?;

        let mut rdr = csv::Reader::from_path(edges)?;
        let headers = rdr.headers()?.clone();
        let cols: Vec<&str> = headers.iter().map(str::trim).collect();
        if cols != ["from_id", "to_id"] {
            return Err(Error::Data(format!(
                "{}: expected header from_id,to_id",
                edges.display()
            )));
        }
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |k: usize| -> Result<usize> {
                rec.get(k)
                    .map(str::trim)
                    .unwrap_or("")
                    .parse::<usize>()
                    .map_err(|e| {
                        Error::Data(format!("{}: row {}: {e}", edges.display(), line + 2))
                    })
            };
            let (a, b) = (parse(0)?, parse(1)?);
            network
                .connect(a, b)
                .map_err(|e| Error::Data(format!("{}: row {}: {e}", edges.display(), line + 2)))?;
        }
        Ok(network)
    }

    pub fn write_csv(&self, stations: &Path, edges: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(stations)?;
        match self.mode {
            CoordinateMode::Geographic => w.write_record(["id", "name", "lat", "lon"])?,
            CoordinateMode::Planar => w.write_record(["id", "name", "x", "y"])?,
        }
        for s in &self.stations {
            w.write_record([
                s.id.to_string(),
                s.name.clone(),
                s.position.0.to_string(),
                s.position.1.to_string(),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(edges)?;
        w.write_record(["from_id", "to_id"])?;
        for (a, b) in &self.connections {
            w.write_record([a.to_string(), b.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Great-circle distance in km between two `(lat, lon)` points in degrees.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Cosine similarity of two station coordinate vectors.
pub fn cosine_spatial_weight(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    let na = (a.0 * a.0 + a.1 * a.1).sqrt();
    let nb = (b.0 * b.0 + b.1 * b.1).sqrt();
    if na == 0.0 || nb == 0.0 {
        bail_arg!("cosine weight of a zero coordinate vector");
    }
    Ok((a.0 * b.0 + a.1 * b.1) / (na * nb))
}

/// Sparse symmetric station-by-station weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RailAdjacency {
    size: usize,
    /// Row-wise neighbour lists sorted by column; both directions stored.
    rows: Vec<Vec<(usize, f64)>>,
}

impl RailAdjacency {
    /// Builds from unordered pairs. Pairs with non-positive weight are dropped.
    pub fn from_pairs(size: usize, pairs: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut rows = vec![Vec::new(); size];
        for (i, j, w) in pairs {
            if i >= size || j >= size {
                bail_arg!("adjacency entry ({i},{j}) outside {size}x{size}");
            }
            if i == j {
                bail_arg!("adjacency entries must be off-diagonal, got ({i},{i})");
            }
            if !(w > 0.0) {
                continue;
            }
            if w > 1.0 {
                bail_arg!("adjacency weight {w} for ({i},{j}) exceeds 1");
            }
            rows[i].push((j, w));
            rows[j].push((i, w));
        }
        for row in &mut rows {
            row.sort_by_key(|&(j, _)| j);
            let before = row.len();
            row.dedup_by_key(|e| e.0);
            if row.len() != before {
                bail_arg!("duplicate adjacency pair");
            }
        }
        Ok(Self { size, rows })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.rows
            .get(i)
            .and_then(|r| r.binary_search_by_key(&j, |e| e.0).ok().map(|k| r[k].1))
            .unwrap_or(0.0)
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// All stored directed entries `(i, j, w)`; each pair appears twice.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(j, w)| (i, j, w)))
    }

    /// Unordered pairs `(i, j, w)` with `i < j`.
    pub fn pairs(&self) -> Vec<(usize, usize, f64)> {
        self.entries().filter(|&(i, j, _)| i < j).collect()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Writes `i,j,weight` rows, one per stored directed entry.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "i,j,weight")?;
        for (i, j, w) in self.entries() {
            writeln!(out, "{i},{j},{w}")?;
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let f = File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Railroad-oriented adjacency: 1 for track-connected pairs, `1 - d/d_max`
/// for unconnected pairs closer than `d_max`, absent otherwise.
pub fn build_adjacency(network: &RailNetwork, d_max: f64) -> Result<RailAdjacency> {
    if !(d_max > 0.0) || !d_max.is_finite() {
        bail_arg!("d_max must be positive and finite, got {d_max}");
    }
    let n = network.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let w = if network.is_connected(i, j) {
                1.0
            } else {
                let d = network.distance(i, j)?;
                if d < d_max {
                    1.0 - d / d_max
                } else {
                    0.0
                }
            };
            if w > 0.0 {
                pairs.push((i, j, w));
            }
        }
    }
    RailAdjacency::from_pairs(n, pairs)
}

/// Station graph weighted by cosine similarity of coordinate vectors,
/// keeping only positive similarities.
pub fn build_cosine_adjacency(network: &RailNetwork) -> Result<RailAdjacency> {
    let n = network.len();
    let st = network.stations();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let w = cosine_spatial_weight(st[i].position, st[j].position)?;
            // round-off can push identical directions a hair above 1
            let w = w.min(1.0);
            if w > 0.0 {
                pairs.push((i, j, w));
            }
        }
    }
    RailAdjacency::from_pairs(n, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planar(points: &[(f64, f64)]) -> RailNetwork {
        let stations = points
            .iter()
            .enumerate()
            .map(|(id, &p)| Station {
                id,
                name: format!("s{id}"),
                position: p,
            })
            .collect();
        RailNetwork::new(stations, CoordinateMode::Planar).unwrap()
    }

    /// Angle between unit vectors on the sphere, via atan2 of cross and dot.
    fn vector_oracle_km(a: (f64, f64), b: (f64, f64)) -> f64 {
        let unit = |(lat, lon): (f64, f64)| {
            let (la, lo) = (lat.to_radians(), lon.to_radians());
            [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
        };
        let (u, v) = (unit(a), unit(b));
        let cross = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let cn = (cross[0].powi(2) + cross[1].powi(2) + cross[2].powi(2)).sqrt();
        let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
        EARTH_RADIUS_KM * cn.atan2(dot)
    }

    #[test]
    fn distance_basics() {
        let net = planar(&[(0.0, 0.0), (3.0, 4.0)]);
        assert_eq!(net.distance(0, 0).unwrap(), 0.0);
        assert_eq!(net.distance(0, 1).unwrap(), 5.0);
        assert_eq!(net.distance(1, 0).unwrap(), 5.0);
        assert!(matches!(net.distance(0, 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn tokyo_shinjuku_haversine() {
        let tokyo = (35.6812, 139.7671);
        let shinjuku = (35.6896, 139.7006);
        let stations = vec![
            Station { id: 0, name: "Tokyo".into(), position: tokyo },
            Station { id: 1, name: "Shinjuku".into(), position: shinjuku },
        ];
        let net = RailNetwork::new(stations, CoordinateMode::Geographic).unwrap();
        let d = net.distance(0, 1).unwrap();
        // frozen from the vector oracle: 6.07822 km
        assert!((d - 6.0782).abs() < 0.01, "{d}");
        assert!((d - vector_oracle_km(tokyo, shinjuku)).abs() < 0.01);
    }

    #[test]
    fn adjacency_branches() {
        // 0-1 connected far apart, 0-2 at 1.5 km, 0-3 at exactly 3 km
        let mut net = planar(&[(0.0, 0.0), (10.0, 0.0), (1.5, 0.0), (0.0, 3.0)]);
        net.connect(0, 1).unwrap();
        let adj = build_adjacency(&net, 3.0).unwrap();
        assert_eq!(adj.weight(0, 1), 1.0);
        assert_eq!(adj.weight(0, 2), 0.5);
        assert_eq!(adj.weight(2, 0), 0.5);
        assert_eq!(adj.weight(0, 3), 0.0);
        assert_eq!(adj.weight(0, 0), 0.0);
        assert!(adj.entries().all(|(i, j, _)| i != j));
        assert!(matches!(build_adjacency(&net, 0.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn connection_rules() {
        let mut net = planar(&[(0.0, 0.0), (1.0, 0.0)]);
        assert!(net.connect(0, 0).is_err());
        net.connect(1, 0).unwrap();
        net.connect(0, 1).unwrap();
        assert_eq!(net.connection_count(), 1);
        assert!(net.connect(0, 5).is_err());
    }

    #[test]
    fn cosine_weights() {
        assert!((cosine_spatial_weight((2.0, 3.0), (2.0, 3.0)).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_spatial_weight((1.0, 0.0), (0.0, 1.0)).unwrap(), 0.0);
        let c = cosine_spatial_weight((1.0, 0.0), (1.0, 1.0)).unwrap();
        assert!((c - 0.70710678).abs() < 1e-8);
        assert!(cosine_spatial_weight((0.0, 0.0), (1.0, 1.0)).is_err());
    }

    #[test]
    fn csv_export_lists_both_directions() {
        let mut net = planar(&[(0.0, 0.0), (1.0, 0.0)]);
        net.connect(0, 1).unwrap();
        let adj = build_adjacency(&net, 0.5).unwrap();
        let mut buf = Vec::new();
        adj.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "i,j,weight\n0,1,1\n1,0,1\n");
    }
}
