//! The forecast network: per-node embedders, a grid-to-mesh encoder, a stack
//! of message-passing blocks on the multi-scale mesh, and a mesh-to-grid
//! decoder.
//!
//! The default block is the gated multi-head variant: every edge produces
//! per-head gate vectors from its own latent and its endpoints, the gated
//! streams are averaged into a new edge latent, and nodes aggregate incoming
//! edges through per-head attention weights. An MLP-only block (plain edge
//! update and sum aggregation) is available as an ablation.

use std::sync::Arc;

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meshgraph::EarthGraph;
use crate::tensorcore::{
    ParamBinding, ParamId, ParamStore, Real, Tape, Tensor2, Var, LAYERNORM_EPS,
};

/// Which message-passing block the processor stack uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Messaging {
    /// Gated multi-head edge update followed by node attention.
    Gated,
    /// Plain edge-update MLP with sum aggregation.
    Mlp,
}

/// Model shape. Paper-scale values are latent 512, 16 blocks, 69 channels;
/// the desk defaults keep every test fast.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub latent_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Per-head gate width; 0 means "track `latent_dim`". Must divide
    /// `latent_dim`; gates narrower than the latent are block-tiled up.
    pub gate_dim: usize,
    pub gate_hidden: usize,
    pub attn_hidden: usize,
    /// Input channels per grid node.
    pub n_channels: usize,
    /// Output channels; 0 means "same as input" (the global model case).
    /// Regional models driven by forcing take more channels in than out.
    #[serde(default)]
    pub out_channels: usize,
    pub messaging: Messaging,
}

impl NetworkConfig {
    pub fn desk(n_channels: usize) -> Self {
        NetworkConfig {
            latent_dim: 32,
            n_blocks: 4,
            n_heads: 4,
            gate_dim: 0,
            gate_hidden: 64,
            attn_hidden: 64,
            n_channels,
            out_channels: 0,
            messaging: Messaging::Gated,
        }
    }

    pub fn resolved_out_channels(&self) -> usize {
        if self.out_channels == 0 {
            self.n_channels
        } else {
            self.out_channels
        }
    }

    pub fn resolved_gate_dim(&self) -> usize {
        if self.gate_dim == 0 {
            self.latent_dim
        } else {
            self.gate_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("gate_hidden", self.gate_hidden),
            ("attn_hidden", self.attn_hidden),
            ("n_channels", self.n_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let d = self.resolved_gate_dim();
        if !self.latent_dim.is_multiple_of(d) {
            return Err(Error::Config(format!(
                "gate_dim {d} must divide latent_dim {}; the elementwise gate \
                 products need the tiled gate to match the latent width",
                self.latent_dim
            )));
        }
        Ok(())
    }
}

/// Graph data reshaped for the network: feature matrices plus index arrays.
///
/// Every edge list is sorted by `(receiver, sender)`, so aggregation order is
/// a function of the graph alone and permuting the builder's edge order
/// cannot change forward results.
pub struct GraphTensors<T: Real> {
    pub n_grid: usize,
    pub n_mesh: usize,
    pub mesh_feats: Tensor2<T>,
    pub medge_feats: Tensor2<T>,
    pub medge_src: Arc<Vec<usize>>,
    pub medge_dst: Arc<Vec<usize>>,
    pub g2m_feats: Tensor2<T>,
    pub g2m_src: Arc<Vec<usize>>,
    pub g2m_dst: Arc<Vec<usize>>,
    pub m2g_feats: Tensor2<T>,
    pub m2g_src: Arc<Vec<usize>>,
    pub m2g_dst: Arc<Vec<usize>>,
}

fn sorted_edges<T: Real>(
    lists: &[(&[u32], &[u32], &[f64])],
) -> (Tensor2<T>, Arc<Vec<usize>>, Arc<Vec<usize>>) {
    let mut rows: Vec<(usize, usize, [f64; 4])> = Vec::new();
    for (senders, receivers, feats) in lists {
        for i in 0..senders.len() {
            rows.push((
                receivers[i] as usize,
                senders[i] as usize,
                [
                    feats[4 * i],
                    feats[4 * i + 1],
                    feats[4 * i + 2],
                    feats[4 * i + 3],
                ],
            ));
        }
    }
    rows.sort_by_key(|a| (a.0, a.1));
    let n = rows.len();
    let mut feats = Vec::with_capacity(4 * n);
    let mut src = Vec::with_capacity(n);
    let mut dst = Vec::with_capacity(n);
    for (r, s, f) in rows {
        dst.push(r);
        src.push(s);
        feats.extend_from_slice(&f);
    }
    (
        Tensor2::from_f64_slice(n, 4, &feats),
        Arc::new(src),
        Arc::new(dst),
    )
}

impl<T: Real> GraphTensors<T> {
    /// Flatten a graph into network inputs. Mesh edges are the union of all
    /// levels plus the region-refined set.
    pub fn new(graph: &EarthGraph) -> Self {
        let mesh_feats =
            Tensor2::from_f64_slice(graph.n_mesh(), 3, &graph.mesh_node_feats);
        let mesh_lists: Vec<(&[u32], &[u32], &[f64])> = graph
            .mesh_edges_by_level
            .iter()
            .chain([&graph.region_edges])
            .map(|s| (&s.senders[..], &s.receivers[..], &s.features[..]))
            .collect();
        let (medge_feats, medge_src, medge_dst) = sorted_edges(&mesh_lists);
        let (g2m_feats, g2m_src, g2m_dst) = sorted_edges(&[(
            &graph.g2m.senders,
            &graph.g2m.receivers,
            &graph.g2m.features,
        )]);
        let (m2g_feats, m2g_src, m2g_dst) = sorted_edges(&[(
            &graph.m2g.senders,
            &graph.m2g.receivers,
            &graph.m2g.features,
        )]);
        GraphTensors {
            n_grid: graph.n_grid(),
            n_mesh: graph.n_mesh(),
            mesh_feats,
            medge_feats,
            medge_src,
            medge_dst,
            g2m_feats,
            g2m_src,
            g2m_dst,
            m2g_feats,
            m2g_src,
            m2g_dst,
        }
    }
}

/// Linear → SiLU → LayerNorm.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w: ParamId,
    pub b: ParamId,
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

/// Edge-sum MLP: separate linear maps of edge, source, and destination
/// latents are summed, passed through SiLU, an output linear, and LayerNorm.
#[derive(Debug, Clone)]
pub struct EsmlpParams {
    pub we: ParamId,
    pub ws: ParamId,
    pub wd: ParamId,
    pub bd: ParamId,
    pub wout: ParamId,
    pub bout: ParamId,
    pub gain: ParamId,
    pub bias: ParamId,
}

/// One gated processor block.
#[derive(Debug, Clone)]
pub struct GatedBlockParams {
    pub gate_w1: ParamId,
    pub gate_b1: ParamId,
    pub gate_w2: ParamId,
    pub gate_b2: ParamId,
    pub esmlp: EsmlpParams,
    pub attn_w1: ParamId,
    pub attn_b1: ParamId,
    pub attn_w2: ParamId,
    pub attn_b2: ParamId,
    pub node: MlpParams,
}

/// Ablation block: edge-sum MLP update plus sum aggregation.
#[derive(Debug, Clone)]
pub struct MlpBlockParams {
    pub esmlp: EsmlpParams,
    pub node: MlpParams,
}

#[derive(Debug, Clone)]
pub enum BlockParams {
    Gated(GatedBlockParams),
    Mlp(MlpBlockParams),
}

/// Parameter layout of the full network; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: NetworkConfig,
    pub embed_grid: MlpParams,
    pub embed_mesh: MlpParams,
    pub embed_medge: MlpParams,
    pub embed_g2m: MlpParams,
    pub embed_m2g: MlpParams,
    pub enc_esmlp: EsmlpParams,
    pub enc_mesh: MlpParams,
    pub enc_grid: MlpParams,
    pub blocks: Vec<BlockParams>,
    pub dec_esmlp: EsmlpParams,
    pub dec_grid: MlpParams,
    pub dec_out: LinearParams,
}

fn add_mlp<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
) -> MlpParams {
    MlpParams {
        w: store.add_uniform(format!("{prefix}.w"), out_dim, in_dim, in_dim, rng),
        b: store.add_uniform(format!("{prefix}.b"), 1, out_dim, in_dim, rng),
        gain: store.add_constant(format!("{prefix}.ln_gain"), 1, out_dim, 1.0),
        bias: store.add_constant(format!("{prefix}.ln_bias"), 1, out_dim, 0.0),
    }
}

fn add_esmlp<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    latent: usize,
) -> EsmlpParams {
    EsmlpParams {
        we: store.add_uniform(format!("{prefix}.we"), latent, latent, latent, rng),
        ws: store.add_uniform(format!("{prefix}.ws"), latent, latent, latent, rng),
        wd: store.add_uniform(format!("{prefix}.wd"), latent, latent, latent, rng),
        bd: store.add_uniform(format!("{prefix}.bd"), 1, latent, latent, rng),
        wout: store.add_uniform(format!("{prefix}.wout"), latent, latent, latent, rng),
        bout: store.add_uniform(format!("{prefix}.bout"), 1, latent, latent, rng),
        gain: store.add_constant(format!("{prefix}.ln_gain"), 1, latent, 1.0),
        bias: store.add_constant(format!("{prefix}.ln_bias"), 1, latent, 0.0),
    }
}

impl Model {
    /// Allocate all parameters with seeded uniform(−1/√fan_in, 1/√fan_in)
    /// init (LayerNorm affine starts at identity).
    pub fn build<T: Real>(
        config: NetworkConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
    ) -> Result<Model> {
        config.validate()?;
        let n = config.latent_dim;
        let d = config.n_channels;
        let heads = config.n_heads;
        let gate_dim = config.resolved_gate_dim();

        let embed_grid = add_mlp(store, rng, "embed.grid", d, n);
        let embed_mesh = add_mlp(store, rng, "embed.mesh", 3, n);
        let embed_medge = add_mlp(store, rng, "embed.medge", 4, n);
        let embed_g2m = add_mlp(store, rng, "embed.g2m", 4, n);
        let embed_m2g = add_mlp(store, rng, "embed.m2g", 4, n);

        let enc_esmlp = add_esmlp(store, rng, "encoder.esmlp", n);
        let enc_mesh = add_mlp(store, rng, "encoder.mesh", 2 * n, n);
        let enc_grid = add_mlp(store, rng, "encoder.grid", n, n);

        let mut blocks = Vec::with_capacity(config.n_blocks);
        for bi in 0..config.n_blocks {
            let prefix = format!("block{bi}");
            let block = match config.messaging {
                Messaging::Gated => BlockParams::Gated(GatedBlockParams {
                    gate_w1: store.add_uniform(
                        format!("{prefix}.gate.w1"),
                        config.gate_hidden,
                        3 * n,
                        3 * n,
                        rng,
                    ),
                    gate_b1: store.add_uniform(
                        format!("{prefix}.gate.b1"),
                        1,
                        config.gate_hidden,
                        3 * n,
                        rng,
                    ),
                    gate_w2: store.add_uniform(
                        format!("{prefix}.gate.w2"),
                        3 * heads * gate_dim,
                        config.gate_hidden,
                        config.gate_hidden,
                        rng,
                    ),
                    gate_b2: store.add_uniform(
                        format!("{prefix}.gate.b2"),
                        1,
                        3 * heads * gate_dim,
                        config.gate_hidden,
                        rng,
                    ),
                    esmlp: add_esmlp(store, rng, &format!("{prefix}.esmlp"), n),
                    attn_w1: store.add_uniform(
                        format!("{prefix}.attn.w1"),
                        config.attn_hidden,
                        n,
                        n,
                        rng,
                    ),
                    attn_b1: store.add_uniform(
                        format!("{prefix}.attn.b1"),
                        1,
                        config.attn_hidden,
                        n,
                        rng,
                    ),
                    attn_w2: store.add_uniform(
                        format!("{prefix}.attn.w2"),
                        heads,
                        config.attn_hidden,
                        config.attn_hidden,
                        rng,
                    ),
                    attn_b2: store.add_uniform(
                        format!("{prefix}.attn.b2"),
                        1,
                        heads,
                        config.attn_hidden,
                        rng,
                    ),
                    node: add_mlp(store, rng, &format!("{prefix}.node"), (heads + 1) * n, n),
                }),
                Messaging::Mlp => BlockParams::Mlp(MlpBlockParams {
                    esmlp: add_esmlp(store, rng, &format!("{prefix}.esmlp"), n),
                    node: add_mlp(store, rng, &format!("{prefix}.node"), 2 * n, n),
                }),
            };
            blocks.push(block);
        }

        let dec_esmlp = add_esmlp(store, rng, "decoder.esmlp", n);
        let dec_grid = add_mlp(store, rng, "decoder.grid", 2 * n, n);
        let d_out = config.resolved_out_channels();
        let dec_out = LinearParams {
            w: store.add_uniform("decoder.out.w", d_out, n, n, rng),
            b: store.add_uniform("decoder.out.b", 1, d_out, n, rng),
        };

        Ok(Model {
            config,
            embed_grid,
            embed_mesh,
            embed_medge,
            embed_g2m,
            embed_m2g,
            enc_esmlp,
            enc_mesh,
            enc_grid,
            blocks,
            dec_esmlp,
            dec_grid,
            dec_out,
        })
    }
}

/// Latent state flowing through one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub grid: Var,
    pub mesh: Var,
    pub medge: Var,
    pub g2m: Var,
    pub m2g: Var,
}

/// One forward pass wired onto a tape.
pub struct ForwardPass<'a, T: Real> {
    pub tape: &'a Tape<T>,
    pub bind: &'a ParamBinding,
    pub model: &'a Model,
    pub gt: &'a GraphTensors<T>,
}

impl<'a, T: Real> ForwardPass<'a, T> {
    fn eps(&self) -> T {
        T::from_f64(LAYERNORM_EPS)
    }

    fn mlp(&self, x: Var, p: &MlpParams) -> Var {
        let y = self.tape.linear(x, self.bind.var(p.w), Some(self.bind.var(p.b)));
        let y = self.tape.silu(y);
        self.tape
            .layernorm(y, self.bind.var(p.gain), self.bind.var(p.bias), self.eps())
    }

    /// Edge-sum MLP over aligned edge/source/destination latent rows.
    pub fn esmlp(&self, edge: Var, src: Var, dst: Var, p: &EsmlpParams) -> Var {
        let tape = self.tape;
        let e = tape.matmul_nt(edge, self.bind.var(p.we));
        let s = tape.matmul_nt(src, self.bind.var(p.ws));
        let d = tape.linear(dst, self.bind.var(p.wd), Some(self.bind.var(p.bd)));
        let sum = tape.add(tape.add(e, s), d);
        let act = tape.silu(sum);
        let out = tape.linear(act, self.bind.var(p.wout), Some(self.bind.var(p.bout)));
        tape.layernorm(out, self.bind.var(p.gain), self.bind.var(p.bias), self.eps())
    }

    fn check_finite(&self, stage: &str, vars: &[Var]) -> Result<()> {
        for v in vars {
            if !self.tape.value(*v).all_finite() {
                return Err(Error::NonFinite {
                    stage: stage.to_string(),
                    at: None,
                });
            }
        }
        Ok(())
    }

    /// Five independent embedders: grid physical channels, mesh node
    /// features, and the three edge feature sets.
    pub fn embed(&self, input: Var) -> Result<LatentVars> {
        let gt = self.gt;
        assert_eq!(
            self.tape.shape(input),
            (gt.n_grid, self.model.config.n_channels),
            "embed input must be [n_grid × n_channels]"
        );
        let grid = self.mlp(input, &self.model.embed_grid);
        let mesh_feats = self.tape.leaf(gt.mesh_feats.clone());
        let mesh = self.mlp(mesh_feats, &self.model.embed_mesh);
        let medge_feats = self.tape.leaf(gt.medge_feats.clone());
        let medge = self.mlp(medge_feats, &self.model.embed_medge);
        let g2m_feats = self.tape.leaf(gt.g2m_feats.clone());
        let g2m = self.mlp(g2m_feats, &self.model.embed_g2m);
        let m2g_feats = self.tape.leaf(gt.m2g_feats.clone());
        let m2g = self.mlp(m2g_feats, &self.model.embed_m2g);
        let ls = LatentVars {
            grid,
            mesh,
            medge,
            g2m,
            m2g,
        };
        self.check_finite("embed", &[grid, mesh, medge, g2m, m2g])?;
        Ok(ls)
    }

    /// Project grid latents into the mesh along g2m edges, with residuals on
    /// the edge, mesh, and grid streams.
    pub fn encode_grid2mesh(&self, ls: LatentVars) -> Result<LatentVars> {
        let tape = self.tape;
        let gt = self.gt;
        let src = tape.gather_rows(ls.grid, gt.g2m_src.clone());
        let dst = tape.gather_rows(ls.mesh, gt.g2m_dst.clone());
        let eprime = self.esmlp(ls.g2m, src, dst, &self.model.enc_esmlp);
        let agg = tape.segment_sum(eprime, gt.g2m_dst.clone(), gt.n_mesh);
        let mesh_in = tape.concat_cols(&[ls.mesh, agg]);
        let mesh_upd = self.mlp(mesh_in, &self.model.enc_mesh);
        let grid_upd = self.mlp(ls.grid, &self.model.enc_grid);
        let out = LatentVars {
            grid: tape.add(ls.grid, grid_upd),
            mesh: tape.add(ls.mesh, mesh_upd),
            medge: ls.medge,
            g2m: tape.add(ls.g2m, eprime),
            m2g: ls.m2g,
        };
        self.check_finite("encode_grid2mesh", &[out.grid, out.mesh, out.g2m])?;
        Ok(out)
    }

    /// Gated edge update: per-head gate vectors weight the updated edge
    /// latent against the two endpoint latents, averaged over streams, plus
    /// the residual.
    pub fn gated_edge_update(&self, ls: LatentVars, p: &GatedBlockParams) -> Var {
        let tape = self.tape;
        let gt = self.gt;
        let cfg = &self.model.config;
        let gate_dim = cfg.resolved_gate_dim();
        let reps = cfg.latent_dim / gate_dim;

        let hs = tape.gather_rows(ls.mesh, gt.medge_src.clone());
        let hd = tape.gather_rows(ls.mesh, gt.medge_dst.clone());
        let cat = tape.concat_cols(&[ls.medge, hs, hd]);
        let z = tape.linear(cat, self.bind.var(p.gate_w1), Some(self.bind.var(p.gate_b1)));
        let z = tape.silu(z);
        let gates = tape.linear(z, self.bind.var(p.gate_w2), Some(self.bind.var(p.gate_b2)));
        let gates = tape.sigmoid(gates);
        let eprime = self.esmlp(ls.medge, hs, hd, &p.esmlp);

        // Gate layout: head-major blocks of (edge, source, destination).
        let mut acc: Option<Var> = None;
        for h in 0..cfg.n_heads {
            let base = 3 * h * gate_dim;
            let ge = tape.tile_cols(tape.slice_cols(gates, base, gate_dim), reps);
            let gs = tape.tile_cols(tape.slice_cols(gates, base + gate_dim, gate_dim), reps);
            let gd = tape.tile_cols(tape.slice_cols(gates, base + 2 * gate_dim, gate_dim), reps);
            let term_e = tape.mul(ge, eprime);
            let term_s = tape.mul(gs, hs);
            let term_d = tape.mul(gd, hd);
            let term = tape.add(tape.add(term_e, term_s), term_d);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        let third = tape.scale(acc.unwrap(), T::from_f64(1.0 / 3.0));
        tape.add(third, ls.medge)
    }

    /// Node attention: per-head scores on updated edges, softmax over each
    /// receiver's incoming edges, weighted sums flattened across heads, and
    /// an MLP with residual.
    pub fn attention_node_update(&self, edge_new: Var, mesh: Var, p: &GatedBlockParams) -> Var {
        let tape = self.tape;
        let gt = self.gt;
        let a1 = tape.linear(edge_new, self.bind.var(p.attn_w1), Some(self.bind.var(p.attn_b1)));
        let a1 = tape.silu(a1);
        let scores = tape.linear(a1, self.bind.var(p.attn_w2), Some(self.bind.var(p.attn_b2)));
        let scores = tape.sigmoid(scores);
        let alpha = tape.segment_softmax(scores, gt.medge_dst.clone(), gt.n_mesh);
        let mut heads = Vec::with_capacity(self.model.config.n_heads);
        for h in 0..self.model.config.n_heads {
            let col = tape.slice_cols(alpha, h, 1);
            let weighted = tape.scale_rows(edge_new, col);
            heads.push(tape.segment_sum(weighted, gt.medge_dst.clone(), gt.n_mesh));
        }
        heads.push(mesh);
        let node_in = tape.concat_cols(&heads);
        let upd = self.mlp(node_in, &p.node);
        tape.add(upd, mesh)
    }

    /// One processor block over the union of all mesh edge sets.
    pub fn block(&self, ls: LatentVars, params: &BlockParams) -> Result<LatentVars> {
        let out = match params {
            BlockParams::Gated(p) => {
                let edge_new = self.gated_edge_update(ls, p);
                let mesh_new = self.attention_node_update(edge_new, ls.mesh, p);
                LatentVars {
                    medge: edge_new,
                    mesh: mesh_new,
                    ..ls
                }
            }
            BlockParams::Mlp(p) => {
                let tape = self.tape;
                let gt = self.gt;
                let hs = tape.gather_rows(ls.mesh, gt.medge_src.clone());
                let hd = tape.gather_rows(ls.mesh, gt.medge_dst.clone());
                let eprime = self.esmlp(ls.medge, hs, hd, &p.esmlp);
                let agg = tape.segment_sum(eprime, gt.medge_dst.clone(), gt.n_mesh);
                let node_in = tape.concat_cols(&[ls.mesh, agg]);
                let upd = self.mlp(node_in, &p.node);
                LatentVars {
                    medge: tape.add(ls.medge, eprime),
                    mesh: tape.add(ls.mesh, upd),
                    ..ls
                }
            }
        };
        Ok(out)
    }

    /// Map mesh latents back to the grid and emit physical channels.
    pub fn decode_mesh2grid(&self, ls: LatentVars) -> Result<Var> {
        let tape = self.tape;
        let gt = self.gt;
        let src = tape.gather_rows(ls.mesh, gt.m2g_src.clone());
        let dst = tape.gather_rows(ls.grid, gt.m2g_dst.clone());
        let eprime = self.esmlp(ls.m2g, src, dst, &self.model.dec_esmlp);
        let agg = tape.segment_sum(eprime, gt.m2g_dst.clone(), gt.n_grid);
        let grid_in = tape.concat_cols(&[ls.grid, agg]);
        let upd = self.mlp(grid_in, &self.model.dec_grid);
        let grid = tape.add(ls.grid, upd);
        let out = tape.linear(
            grid,
            self.bind.var(self.model.dec_out.w),
            Some(self.bind.var(self.model.dec_out.b)),
        );
        self.check_finite("decode_mesh2grid", &[out])?;
        Ok(out)
    }

    /// Full forward: embed → encode → blocks → decode. Returns the grid
    /// output variable, `[n_grid × n_channels]`.
    pub fn forward(&self, input: Var) -> Result<Var> {
        let ls = self.embed(input)?;
        let mut ls = self.encode_grid2mesh(ls)?;
        for (bi, params) in self.model.blocks.iter().enumerate() {
            ls = self.block(ls, params)?;
            if !self.tape.value(ls.mesh).all_finite() || !self.tape.value(ls.medge).all_finite() {
                return Err(Error::NonFinite {
                    stage: format!("block{bi}"),
                    at: None,
                });
            }
        }
        self.decode_mesh2grid(ls)
    }
}

/// Run a forward pass on a fresh tape and return the output matrix.
pub fn forward<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    gt: &GraphTensors<T>,
    input: &Tensor2<T>,
) -> Result<Tensor2<T>> {
    let tape = Tape::new();
    let bind = store.bind(&tape);
    let pass = ForwardPass {
        tape: &tape,
        bind: &bind,
        model,
        gt,
    };
    let input_var = tape.leaf(input.clone());
    let out = pass.forward(input_var)?;
    let value = tape.value(out).clone();
    Ok(value)
}
