//! Straight-line f64 versions of the deconfounding path, written with plain
//! loops and no tensor library.

use vlci_core::backbone::ModelConfig;
use vlci_core::nn::ParamStore;

pub type M = Vec<Vec<f64>>;

fn mat(p: &ParamStore, name: &str) -> M {
    p.get(name).unwrap().to_vec2::<f64>().unwrap()
}

fn vector(p: &ParamStore, name: &str) -> Vec<f64> {
    p.get(name).unwrap().to_vec1::<f64>().unwrap()
}

fn linear(p: &ParamStore, name: &str, x: &M) -> M {
    let w = mat(p, &format!("{name}.w"));
    let b = vector(p, &format!("{name}.b"));
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| {
                    b[j] + row
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * w[i][j])
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn layer_norm(p: &ParamStore, name: &str, x: &M) -> M {
    let g = vector(p, &format!("{name}.g"));
    let b = vector(p, &format!("{name}.b"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn ffn(p: &ParamStore, name: &str, x: &M) -> M {
    let h: M = linear(p, &format!("{name}.fc1"), x)
        .into_iter()
        .map(|r| {
            r.into_iter()
                .map(|v| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt())))
                .collect()
        })
        .collect();
    linear(p, &format!("{name}.fc2"), &h)
}

fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

fn sub(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u - v).collect())
        .collect()
}

/// Multi-head attention on projected inputs. `bias(h, i, j)` is added to the
/// logits; `causal` hides keys after the query index.
fn attend(
    q: &M,
    k: &M,
    v: &M,
    heads: usize,
    bias: &dyn Fn(usize, usize, usize) -> f64,
    causal: bool,
) -> M {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let keys = if causal { i + 1 } else { k.len() };
            let logits: Vec<f64> = (0..keys)
                .map(|j| {
                    cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                        + bias(h, i, j)
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..keys).map(|j| e[j] / s * v[j][c]).sum();
            }
        }
    }
    out
}

fn no_bias(_: usize, _: usize, _: usize) -> f64 {
    0.0
}

fn mha(
    p: &ParamStore,
    name: &str,
    query: &M,
    memory: &M,
    heads: usize,
    bias: &dyn Fn(usize, usize, usize) -> f64,
) -> M {
    let q = linear(p, &format!("{name}.q"), query);
    let k = linear(p, &format!("{name}.k"), memory);
    let v = linear(p, &format!("{name}.v"), memory);
    linear(
        p,
        &format!("{name}.o"),
        &attend(&q, &k, &v, heads, bias, false),
    )
}

fn caam(p: &ParamStore, heads: usize, x: &M) -> M {
    let q = linear(p, "vdm.caam.attn.q", x);
    let k = linear(p, "vdm.caam.attn.k", x);
    let v = linear(p, "vdm.caam.attn.v", x);
    let neg: M = q.iter().map(|r| r.iter().map(|a| -a).collect()).collect();
    let main = linear(
        p,
        "vdm.caam.attn.o",
        &attend(&q, &k, &v, heads, &no_bias, false),
    );
    let comp = linear(
        p,
        "vdm.caam.attn.o",
        &attend(&neg, &k, &v, heads, &no_bias, false),
    );
    add(&ffn(p, "vdm.caam.ffn", &sub(&main, &comp)), x)
}

/// 2 × 2 max pooling of a row-major `grid²` token field.
fn pool(x: &[Vec<f64>], grid: usize) -> M {
    let half = grid / 2;
    let mut out = Vec::new();
    for r in 0..half {
        for c in 0..half {
            let cells = [
                &x[2 * r * grid + 2 * c],
                &x[2 * r * grid + 2 * c + 1],
                &x[(2 * r + 1) * grid + 2 * c],
                &x[(2 * r + 1) * grid + 2 * c + 1],
            ];
            out.push(
                (0..x[0].len())
                    .map(|j| cells.iter().map(|t| t[j]).fold(f64::NEG_INFINITY, f64::max))
                    .collect(),
            );
        }
    }
    out
}

fn global(p: &ParamStore, cfg: &ModelConfig, h_v: &M, views: usize) -> M {
    let g = cfg.patch_grid;
    let half = g / 2;
    let span = 2 * half - 1;
    let table = mat(p, "vdm.global.rel_bias");
    let bias = |h: usize, i: usize, j: usize| {
        let dr = i / half + half - 1 - j / half;
        let dc = i % half + half - 1 - j % half;
        table[h][dr * span + dc]
    };
    let mut out = Vec::new();
    for v in 0..views {
        let rows = &h_v[v * g * g..(v + 1) * g * g];
        let pooled = pool(rows, g);
        let normed = pool(&layer_norm(p, "vdm.global.ln", &rows.to_vec()), g);
        let a = mha(p, "vdm.global.attn", &normed, &normed, cfg.heads, &bias);
        out.extend(linear(p, "vdm.global.proj", &add(&pooled, &a)));
    }
    out
}

fn soft(q: &M, k: &M, v: &M, causal: bool) -> M {
    attend(q, k, v, 1, &no_bias, causal)
}

fn mean_row(x: &M) -> Vec<f64> {
    (0..x[0].len())
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / x.len() as f64)
        .collect()
}

/// Visual mediator from local positions `indices` of `h_v`.
pub fn visual_mediator(
    p: &ParamStore,
    cfg: &ModelConfig,
    h_v: &M,
    indices: &[usize],
    views: usize,
) -> M {
    let local: M = indices.iter().map(|&i| h_v[i].clone()).collect();
    let enhanced = caam(p, cfg.heads, &local);
    let glob = global(p, cfg, h_v, views);
    let s = mha(
        p,
        "vdm.lgfm.self_attn",
        &enhanced,
        &enhanced,
        cfg.heads,
        &no_bias,
    );
    let c = mha(
        p,
        "vdm.lgfm.cross_attn",
        &enhanced,
        &glob,
        cfg.heads,
        &no_bias,
    );
    let cat: M = s
        .iter()
        .zip(&c)
        .map(|(a, b)| a.iter().chain(b).copied().collect())
        .collect();
    ffn(p, "vdm.lgfm.ffn", &cat)
}

/// Linguistic mediator from the same local positions.
pub fn linguistic_mediator(p: &ParamStore, cfg: &ModelConfig, h_v: &M, indices: &[usize]) -> M {
    let local: M = indices.iter().map(|&i| h_v[i].clone()).collect();
    let enhanced = caam(p, cfg.heads, &local);
    let table = mat(p, "embed.tokens");
    let a = mha(p, "ldm.vocab_attn", &enhanced, &table, cfg.heads, &no_bias);
    let h = ffn(p, "ldm.ffn1", &a);
    let b = mha(p, "ldm.local_attn", &h, &enhanced, cfg.heads, &no_bias);
    ffn(p, "ldm.ffn2", &b)
}

/// `F + E_m + E_x` with `E_x` read through the mediator mean; `causal`
/// restricts row `i` of `E_x` to feature rows `0..=i`.
pub fn front_door(features: &M, mediator: &M, causal: bool) -> M {
    let e_m = soft(features, mediator, mediator, false);
    let q = vec![mean_row(mediator); if causal { features.len() } else { 1 }];
    let e_x = soft(&q, features, features, causal);
    features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let x = &e_x[if causal { i } else { 0 }];
            (0..f.len()).map(|j| f[j] + e_m[i][j] + x[j]).collect()
        })
        .collect()
}
