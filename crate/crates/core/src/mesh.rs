//! Iso-surface extraction from decoded density by marching tetrahedra.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::generator::Generator;
use crate::renderer::{density_grid, RenderSettings};
use crate::trigrid::TriGrid;

/// Indexed triangle mesh.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }
}

/// Density at which one sample interval has transmittance 1/2.
pub fn default_density_threshold(settings: &RenderSettings) -> f64 {
    core::f64::consts::LN_2 / settings.spacing()
}

/// Six tetrahedra sharing the cube diagonal 0–7; corners are `dx + 2·dy + 4·dz`.
const TETS: [[usize; 4]; 6] = [[0, 1, 3, 7], [0, 1, 5, 7], [0, 2, 3, 7], [0, 2, 6, 7], [0, 4, 5, 7], [0, 4, 6, 7]];

/// Surface `value = threshold` of samples on the `n³` voxel-centre lattice of
/// `[-1, 1]³`, indexed `(ix·n + iy)·n + iz`. Triangles face away from the
/// region above the threshold.
pub fn isosurface(values: &[f64], n: usize, threshold: f64) -> Result<Mesh> {
    if n < 2 || values.len() != n * n * n {
        return Err(invalid!("{} samples do not form a {n}³ lattice", values.len()));
    }
    let pos = |i: usize| -1.0 + (2 * i + 1) as f64 / n as f64;
    let idx = |x: usize, y: usize, z: usize| (x * n + y) * n + z;
    let point = |g: usize| [pos(g / (n * n)), pos((g / n) % n), pos(g % n)];
    let mut mesh = Mesh::default();
    let mut edge_vertex: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for x in 0..n - 1 {
        for y in 0..n - 1 {
            for z in 0..n - 1 {
                let corners: [usize; 8] = core::array::from_fn(|c| idx(x + (c & 1), y + ((c >> 1) & 1), z + ((c >> 2) & 1)));
                for tet in TETS {
                    let g = tet.map(|c| corners[c]);
                    let inside: Vec<usize> = g.iter().copied().filter(|&v| values[v] > threshold).collect();
                    let outside: Vec<usize> = g.iter().copied().filter(|&v| values[v] <= threshold).collect();
                    if inside.is_empty() || outside.is_empty() {
                        continue;
                    }
                    let mut vert = |a: usize, b: usize| -> usize {
                        let key = if a < b { (a, b) } else { (b, a) };
                        *edge_vertex.entry(key).or_insert_with(|| {
                            let (pa, pb) = (point(key.0), point(key.1));
                            let (va, vb) = (values[key.0], values[key.1]);
                            let t = ((threshold - va) / (vb - va)).clamp(0.0, 1.0);
                            mesh.vertices.push([pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1]), pa[2] + t * (pb[2] - pa[2])]);
                            mesh.vertices.len() - 1
                        })
                    };
                    let mut tris: Vec<[usize; 3]> = Vec::new();
                    match (inside.len(), outside.len()) {
                        (1, 3) => tris.push([vert(inside[0], outside[0]), vert(inside[0], outside[1]), vert(inside[0], outside[2])]),
                        (3, 1) => tris.push([vert(outside[0], inside[0]), vert(outside[0], inside[1]), vert(outside[0], inside[2])]),
                        _ => {
                            let (a, b) = (inside[0], inside[1]);
                            let (c, d) = (outside[0], outside[1]);
                            let (ac, ad, bc, bd) = (vert(a, c), vert(a, d), vert(b, c), vert(b, d));
                            tris.push([ac, ad, bd]);
                            tris.push([ac, bd, bc]);
                        }
                    }
                    let centroid = |vs: &[usize]| {
                        let mut c = [0.0; 3];
                        for &v in vs {
                            let p = point(v);
                            for k in 0..3 {
                                c[k] += p[k] / vs.len() as f64;
                            }
                        }
                        c
                    };
                    let (ci, co) = (centroid(&inside), centroid(&outside));
                    let out_dir = [co[0] - ci[0], co[1] - ci[1], co[2] - ci[2]];
                    for t in tris {
                        let [p0, p1, p2] = t.map(|v| mesh.vertices[v]);
                        let e1 = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
                        let e2 = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
                        let nrm = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
                        let dot = nrm[0] * out_dir[0] + nrm[1] * out_dir[1] + nrm[2] * out_dir[2];
                        if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                            continue;
                        }
                        mesh.triangles.push(if dot < 0.0 { [t[0], t[2], t[1]] } else { t });
                    }
                }
            }
        }
    }
    Ok(mesh)
}

/// Density iso-surface of a tri-grid decoded on a `grid_res³` lattice.
pub fn export_mesh(gen: &Generator, grid: &TriGrid, grid_res: usize, threshold: f64) -> Result<Mesh> {
    if grid_res < 8 {
        return Err(invalid!("mesh grid resolution {grid_res} is below 8"));
    }
    isosurface(&density_grid(grid, &gen.decoder(), grid_res), grid_res, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::math;
    use crate::trigrid::TriDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere(n: usize, r0: f64) -> Vec<f64> {
        let pos = |i: usize| -1.0 + (2 * i + 1) as f64 / n as f64;
        let mut v = Vec::new();
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    let r = math::sqrt(pos(x) * pos(x) + pos(y) * pos(y) + pos(z) * pos(z));
                    v.push(20.0 * (r0 - r).max(-0.5));
                }
            }
        }
        v
    }

    #[test]
    fn sphere_surface_is_closed_and_accurate() {
        let n = 24;
        let r0 = 0.6;
        let m = isosurface(&sphere(n, r0), n, 5.0).unwrap();
        assert!(!m.is_empty());
        let cell = 2.0 / n as f64;
        let iso_r = r0 - 5.0 / 20.0;
        for v in &m.vertices {
            let r = math::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
            assert!((r - iso_r).abs() < 2.0 * cell, "{r}");
        }
        let mut edges: BTreeMap<(usize, usize), (usize, i32)> = BTreeMap::new();
        for t in &m.triangles {
            assert!(t.iter().all(|&i| i < m.vertices.len()));
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let e = edges.entry((a.min(b), a.max(b))).or_insert((0, 0));
                e.0 += 1;
                e.1 += if a < b { 1 } else { -1 };
            }
            // outward orientation
            let [p0, p1, p2] = t.map(|i| m.vertices[i]);
            let e1 = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
            let e2 = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
            let nrm = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
            assert!(nrm[0] * p0[0] + nrm[1] * p0[1] + nrm[2] * p0[2] > -1e-12);
        }
        // every edge shared by two consistently oriented triangles
        assert!(edges.values().all(|&(c, s)| c == 2 && s == 0));
    }

    #[test]
    fn empty_density_gives_empty_mesh() {
        let n = 8;
        assert!(isosurface(&alloc::vec![0.0; n * n * n], n, 1.0).unwrap().is_empty());
        assert!(isosurface(&[0.0; 10], n, 1.0).is_err());
        let cfg = ModelConfig::tiny();
        let gen = Generator::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let grid = TriGrid::zeros(TriDims::new(cfg.slices, cfg.channels, cfg.grid_res, cfg.grid_res));
        assert!(export_mesh(&gen, &grid, 4, 1.0).is_err());
        let t = default_density_threshold(&RenderSettings::from_config(&cfg));
        assert!((math::exp(-t * RenderSettings::from_config(&cfg).spacing()) - 0.5).abs() < 1e-12);
    }
}
