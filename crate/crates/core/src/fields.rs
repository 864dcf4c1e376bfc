//! The composed pose-conditioned SDF: learned blend weights and un-posing,
//! pose and shape displacement fields, canonical SDF and normal networks.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::geometry::{Mat3, Mat4, Vec3};
use crate::nets::{Activation, EncodingConfig, Head, Mlp, MlpCache, MlpGrads, MlpSpec};
use crate::scalar::Real;
use crate::skeleton::{
    blend_raw, forward_kinematics, unpose_raw, weighted_pose_raw, BlendWeights, Pose, Skeleton, Unposed,
};

/// Architecture of the five sub-networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoding: EncodingConfig,
    pub weight_hidden: Vec<usize>,
    pub displacement_hidden: Vec<usize>,
    pub sdf_hidden: Vec<usize>,
    pub normal_hidden: Vec<usize>,
    pub shape_hidden: Vec<usize>,
    pub softplus_beta: f64,
    /// Initial bias of the SDF output layer.
    pub sdf_init_bias: f64,
    /// Length of the shape code; zero for a single-subject model.
    pub shape_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoding: EncodingConfig::default(),
            weight_hidden: vec![256; 4],
            displacement_hidden: vec![256; 3],
            sdf_hidden: vec![256; 5],
            normal_hidden: vec![256; 3],
            shape_hidden: vec![256; 3],
            softplus_beta: 100.0,
            sdf_init_bias: 0.1,
            shape_dim: 0,
        }
    }
}

/// Where blend weights come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    /// Predicted by the canonical mapping network.
    Learned,
    /// Taken from the body prior at the nearest body-surface point.
    NearestSurface,
}

impl WeightMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightMode::Learned => "learned",
            WeightMode::NearestSurface => "nn-weights",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "learned" => Some(WeightMode::Learned),
            "nn-weights" => Some(WeightMode::NearestSurface),
            _ => None,
        }
    }
}

/// Supplies blend weights for a posed point without a network.
pub trait WeightPrior<T: Real>: Sync {
    fn weights(&self, p: Vec3<T>, ctx: &PoseContext<T>) -> Vec<T>;
}

/// Everything about one pose that every query in that pose shares.
#[derive(Clone, Debug)]
pub struct PoseContext<T> {
    pub pose: Pose<T>,
    pub transforms: Vec<Mat4<T>>,
    pub posed_joints: Vec<Vec3<T>>,
    pub rest_joints: Vec<Vec3<T>>,
    pub shape: Vec<T>,
}

impl<T: Real> PoseContext<T> {
    pub fn new(skeleton: &Skeleton<T>, pose: &Pose<T>, shape: Option<&[T]>) -> Result<Self> {
        let b = forward_kinematics(skeleton, pose)?;
        let posed_joints = b.posed_joints(skeleton);
        Ok(PoseContext {
            pose: pose.clone(),
            transforms: b.transforms,
            posed_joints,
            rest_joints: skeleton.rest_joints().to_vec(),
            shape: shape.map(<[T]>::to_vec).unwrap_or_default(),
        })
    }

    pub fn joint_count(&self) -> usize {
        self.transforms.len()
    }
}

/// Which sub-networks receive parameter gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub weights: bool,
    pub displacement: bool,
    pub sdf: bool,
    pub normal: bool,
    pub shape: bool,
}

#[derive(Clone, Debug)]
pub struct ModelGrads<T> {
    pub weights: Option<MlpGrads<T>>,
    pub displacement: Option<MlpGrads<T>>,
    pub sdf: Option<MlpGrads<T>>,
    pub normal: Option<MlpGrads<T>>,
    pub shape: Option<MlpGrads<T>>,
}

/// A batch of posed queries. `context` maps each point to an entry of `contexts`.
pub struct Query<'a, T> {
    pub points: &'a [Vec3<T>],
    pub contexts: &'a [PoseContext<T>],
    pub context: &'a [usize],
    /// `N × K` weights that replace the canonical mapping network.
    pub fixed_weights: Option<ArrayView2<'a, T>>,
}

/// Forward state kept for the backward pass.
pub struct Trace<T> {
    pub weights: Array2<T>,
    pub canonical: Vec<Vec3<T>>,
    pub displacement: Array2<T>,
    pub shape_displacement: Option<Array2<T>>,
    pub sdf: Vec<T>,
    /// Posed-space normals, when requested.
    pub normals: Option<Vec<Vec3<T>>>,
    /// False where the blended transform was singular; such rows carry no gradient.
    pub valid: Vec<bool>,
    unposed: Vec<Option<Unposed<T>>>,
    deformed: Vec<Vec3<T>>,
    canonical_normals: Option<Array2<T>>,
    cache_w: Option<MlpCache<T>>,
    cache_def: MlpCache<T>,
    cache_shape: Option<MlpCache<T>>,
    cache_sdf: MlpCache<T>,
    cache_norm: Option<MlpCache<T>>,
}

impl<T: Real> Trace<T> {
    pub fn singular_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralGif<T> {
    pub skeleton: Skeleton<T>,
    pub config: ModelConfig,
    pub weight_mode: WeightMode,
    pub weight_net: Mlp<T>,
    pub displacement_net: Mlp<T>,
    pub sdf_net: Mlp<T>,
    pub normal_net: Mlp<T>,
    pub shape_net: Option<Mlp<T>>,
}

/// Network names used in checkpoints.
pub const NET_NAMES: [&str; 5] = ["f_w", "f_def", "f_csdf", "f_norm", "f_def_shape"];

impl<T: Real> NeuralGif<T> {
    pub fn input_dims(config: &ModelConfig, joints: usize) -> [usize; 3] {
        let enc = config.encoding.output_dim();
        let k3 = 3 * joints;
        let s = config.shape_dim;
        [enc + k3 + s, enc + 2 * k3 + s, enc + s]
    }

    pub fn new<R: Rng + ?Sized>(skeleton: Skeleton<T>, config: ModelConfig, rng: &mut R) -> Result<Self> {
        let k = skeleton.joint_count();
        let [w_in, cond_in, shape_in] = Self::input_dims(&config, k);
        let act = Activation::Softplus {
            beta: config.softplus_beta,
        };
        let spec = |input, hidden: &[usize], output, head| {
            let mut s = MlpSpec::new(input, hidden.to_vec(), output, head);
            s.activation = act;
            s
        };
        let weight_net = Mlp::init(&spec(w_in, &config.weight_hidden, k, Head::Simplex), rng)?;
        let mut def_spec = spec(cond_in, &config.displacement_hidden, 3, Head::Linear);
        def_spec.zero_last = true;
        let displacement_net = Mlp::init(&def_spec, rng)?;
        let mut sdf_spec = spec(cond_in, &config.sdf_hidden, 1, Head::Linear);
        sdf_spec.last_bias = config.sdf_init_bias;
        let sdf_net = Mlp::init(&sdf_spec, rng)?;
        let normal_net = Mlp::init(&spec(cond_in, &config.normal_hidden, 3, Head::UnitVector), rng)?;
        let shape_net = if config.shape_dim > 0 {
            let mut s = spec(shape_in, &config.shape_hidden, 3, Head::Linear);
            s.zero_last = true;
            Some(Mlp::init(&s, rng)?)
        } else {
            None
        };
        Ok(NeuralGif {
            skeleton,
            config,
            weight_mode: WeightMode::Learned,
            weight_net,
            displacement_net,
            sdf_net,
            normal_net,
            shape_net,
        })
    }

    /// Reassembles a model from loaded networks, checking every dimension.
    pub fn from_parts(
        skeleton: Skeleton<T>,
        config: ModelConfig,
        weight_mode: WeightMode,
        mut nets: Vec<(String, Mlp<T>)>,
    ) -> Result<Self> {
        let mut find = |name: &str| -> Option<Mlp<T>> {
            let i = nets.iter().position(|(n, _)| n == name)?;
            Some(nets.swap_remove(i).1)
        };
        let missing = |n: &str| Error::invalid(format!("checkpoint lacks network `{n}`"));
        let weight_net = find(NET_NAMES[0]).ok_or_else(|| missing(NET_NAMES[0]))?;
        let displacement_net = find(NET_NAMES[1]).ok_or_else(|| missing(NET_NAMES[1]))?;
        let sdf_net = find(NET_NAMES[2]).ok_or_else(|| missing(NET_NAMES[2]))?;
        let normal_net = find(NET_NAMES[3]).ok_or_else(|| missing(NET_NAMES[3]))?;
        let shape_net = find(NET_NAMES[4]);
        let k = skeleton.joint_count();
        let [w_in, cond_in, shape_in] = Self::input_dims(&config, k);
        check_dim("f_w input", w_in, weight_net.input_dim())?;
        check_dim("f_w output", k, weight_net.output_dim())?;
        check_dim("f_def input", cond_in, displacement_net.input_dim())?;
        check_dim("f_csdf input", cond_in, sdf_net.input_dim())?;
        check_dim("f_norm input", cond_in, normal_net.input_dim())?;
        if (config.shape_dim > 0) != shape_net.is_some() {
            return Err(Error::invalid("shape network present iff shape_dim > 0"));
        }
        if let Some(s) = &shape_net {
            check_dim("f_def_shape input", shape_in, s.input_dim())?;
        }
        Ok(NeuralGif {
            skeleton,
            config,
            weight_mode,
            weight_net,
            displacement_net,
            sdf_net,
            normal_net,
            shape_net,
        })
    }

    pub fn named_nets(&self) -> Vec<(&'static str, &Mlp<T>)> {
        let mut v = vec![
            (NET_NAMES[0], &self.weight_net),
            (NET_NAMES[1], &self.displacement_net),
            (NET_NAMES[2], &self.sdf_net),
            (NET_NAMES[3], &self.normal_net),
        ];
        if let Some(s) = &self.shape_net {
            v.push((NET_NAMES[4], s));
        }
        v
    }

    pub fn joint_count(&self) -> usize {
        self.skeleton.joint_count()
    }

    pub fn context(&self, pose: &Pose<T>, shape: Option<&[T]>) -> Result<PoseContext<T>> {
        let got = shape.map_or(0, <[T]>::len);
        check_dim("shape code", self.config.shape_dim, got)?;
        PoseContext::new(&self.skeleton, pose, shape)
    }

    fn check_context(&self, ctx: &PoseContext<T>) -> Result<()> {
        check_dim("pose context joints", self.joint_count(), ctx.joint_count())?;
        check_dim("pose context shape", self.config.shape_dim, ctx.shape.len())
    }

    /// Rows `[enc(p) | p - j_i | β]` fed to the canonical mapping network.
    pub fn weight_input(&self, points: &[Vec3<T>], contexts: &[PoseContext<T>], context: &[usize]) -> Array2<T> {
        let k = self.joint_count();
        let enc = self.config.encoding;
        let ed = enc.output_dim();
        let [w_in, _, _] = Self::input_dims(&self.config, k);
        let mut x = Array2::zeros((points.len(), w_in));
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            let ctx = &contexts[context[i]];
            let p = points[i];
            let r = row.as_slice_mut().expect("row-major");
            enc.encode_into(p, &mut r[..ed]);
            for (j, joint) in ctx.posed_joints.iter().enumerate() {
                let o = p - *joint;
                r[ed + 3 * j..ed + 3 * j + 3].copy_from_slice(&o.0);
            }
            r[ed + 3 * k..].copy_from_slice(&ctx.shape);
        }
        x
    }

    /// Batched evaluation of the whole composition.
    pub fn forward(&self, q: &Query<'_, T>, with_normals: bool) -> Result<Trace<T>> {
        let n = q.points.len();
        check_dim("query context indices", n, q.context.len())?;
        for c in q.contexts {
            self.check_context(c)?;
        }
        let k = self.joint_count();
        let enc = self.config.encoding;
        let ed = enc.output_dim();

        // canonical mapping
        let (weights, cache_w) = match q.fixed_weights {
            Some(w) => {
                check_dim("fixed weight rows", n, w.nrows())?;
                check_dim("fixed weight cols", k, w.ncols())?;
                (w.to_owned(), None)
            }
            None => {
                let x = self.weight_input(q.points, q.contexts, q.context);
                let cache = self.weight_net.forward_batch(x.view())?;
                (cache.output().clone(), Some(cache))
            }
        };

        let mut unposed = Vec::with_capacity(n);
        let mut canonical = Vec::with_capacity(n);
        let mut valid = Vec::with_capacity(n);
        for i in 0..n {
            let ctx = &q.contexts[q.context[i]];
            let w = weights.row(i);
            match unpose_raw(q.points[i], w.as_slice().expect("row-major"), &ctx.transforms) {
                Ok(u) => {
                    canonical.push(u.point);
                    unposed.push(Some(u));
                    valid.push(true);
                }
                Err(Error::SingularBlend { .. }) => {
                    canonical.push(q.points[i]);
                    unposed.push(None);
                    valid.push(false);
                }
                Err(e) => return Err(e),
            }
        }

        // conditioning shared by f_def, f_csdf and f_norm: [enc | w∘θ | p̄ - j̄ | β]
        let [_, cond_in, shape_in] = Self::input_dims(&self.config, k);
        let mut cond = Array2::zeros((n, cond_in));
        for (i, mut row) in cond.rows_mut().into_iter().enumerate() {
            let ctx = &q.contexts[q.context[i]];
            let r = row.as_slice_mut().expect("row-major");
            let pb = canonical[i];
            enc.encode_into(pb, &mut r[..ed]);
            let wt = weighted_pose_raw(weights.row(i).as_slice().expect("row-major"), &ctx.pose.rotations);
            r[ed..ed + 3 * k].copy_from_slice(&wt);
            for (j, joint) in ctx.rest_joints.iter().enumerate() {
                let o = pb - *joint;
                let at = ed + 3 * k + 3 * j;
                r[at..at + 3].copy_from_slice(&o.0);
            }
            r[ed + 6 * k..].copy_from_slice(&ctx.shape);
        }
        let cache_def = self.displacement_net.forward_batch(cond.view())?;
        let displacement = cache_def.output().clone();

        let (cache_shape, shape_displacement) = match &self.shape_net {
            Some(net) => {
                let mut x = Array2::zeros((n, shape_in));
                for (i, mut row) in x.rows_mut().into_iter().enumerate() {
                    let r = row.as_slice_mut().expect("row-major");
                    enc.encode_into(canonical[i], &mut r[..ed]);
                    r[ed..].copy_from_slice(&q.contexts[q.context[i]].shape);
                }
                let c = net.forward_batch(x.view())?;
                let d = c.output().clone();
                (Some(c), Some(d))
            }
            None => (None, None),
        };

        let mut deformed = Vec::with_capacity(n);
        for i in 0..n {
            let mut qd = canonical[i] + row3(&displacement, i);
            if let Some(sd) = &shape_displacement {
                qd += row3(sd, i);
            }
            deformed.push(qd);
            let r = cond.row_mut(i).into_slice().expect("row-major");
            enc.encode_into(qd, &mut r[..ed]);
        }
        let cache_sdf = self.sdf_net.forward_batch(cond.view())?;
        let sdf: Vec<T> = cache_sdf.output().column(0).to_vec();

        let (cache_norm, canonical_normals, normals) = if with_normals {
            let c = self.normal_net.forward_batch(cond.view())?;
            let nc = c.output().clone();
            let mut posed = Vec::with_capacity(n);
            for i in 0..n {
                let ctx = &q.contexts[q.context[i]];
                let lin = blend_raw(weights.row(i).as_slice().expect("row-major"), &ctx.transforms).linear();
                let raw = lin.mul_vec(row3(&nc, i));
                let unit = raw
                    .try_normalize(T::lit(1e-12))
                    .ok_or(Error::DegenerateNormal(raw.norm().as_f64()))?;
                posed.push(unit);
            }
            (Some(c), Some(nc), Some(posed))
        } else {
            (None, None, None)
        };

        Ok(Trace {
            weights,
            canonical,
            displacement,
            shape_displacement,
            sdf,
            normals,
            valid,
            unposed,
            deformed,
            canonical_normals,
            cache_w,
            cache_def,
            cache_shape,
            cache_sdf,
            cache_norm,
        })
    }

    /// Reverse pass. `grad_sdf` is `∂L/∂d*` per point, `grad_displacement`
    /// an extra `∂L/∂Δp̄_θ` (the regularizer) and `grad_normal` `∂L/∂n*`.
    pub fn backward(
        &self,
        q: &Query<'_, T>,
        trace: &Trace<T>,
        grad_sdf: &[T],
        grad_displacement: Option<&Array2<T>>,
        grad_normal: Option<&[Vec3<T>]>,
        train: Trainable,
    ) -> Result<ModelGrads<T>> {
        let n = q.points.len();
        check_dim("sdf gradient", n, grad_sdf.len())?;
        let k = self.joint_count();
        let enc = self.config.encoding;
        let ed = enc.output_dim();
        let mut out = ModelGrads {
            weights: None,
            displacement: None,
            sdf: None,
            normal: None,
            shape: None,
        };

        let upstream = train.weights || train.displacement || train.shape;
        // ∂L/∂(conditioning) from the normal branch, and ∂L/∂(blended linear · n_c)
        let mut g_cond_normal = None;
        let mut g_raw_normal = None;
        if train.normal {
            let g_n = grad_normal.ok_or_else(|| Error::invalid("normal gradient missing"))?;
            let cache = trace
                .cache_norm
                .as_ref()
                .ok_or_else(|| Error::StaleCache("forward pass ran without normals".into()))?;
            let nc = trace.canonical_normals.as_ref().expect("with normals");
            let posed = trace.normals.as_ref().expect("with normals");
            let mut g = Array2::zeros((n, 3));
            let mut g_raws = Array2::zeros((n, 3));
            for i in 0..n {
                if !trace.valid[i] {
                    continue;
                }
                let ctx = &q.contexts[q.context[i]];
                let lin: Mat3<T> =
                    blend_raw(trace.weights.row(i).as_slice().expect("row-major"), &ctx.transforms).linear();
                let raw = lin.mul_vec(row3(nc, i));
                let len = raw.norm();
                let u = posed[i];
                let gu = g_n[i];
                let g_raw = (gu - u.scale(u.dot(gu))).scale(T::one() / len);
                let g_c = lin.transpose_mul_vec(g_raw);
                for c in 0..3 {
                    g[[i, c]] = g_c[c];
                    g_raws[[i, c]] = g_raw[c];
                }
            }
            let (params, g_in) = self.normal_net.backward_batch(cache, g.view(), upstream)?;
            out.normal = Some(params);
            g_cond_normal = g_in;
            g_raw_normal = Some(g_raws);
        }

        if !(train.sdf || upstream) {
            return Ok(out);
        }

        let mut g_d = Array2::zeros((n, 1));
        for i in 0..n {
            if trace.valid[i] {
                g_d[[i, 0]] = grad_sdf[i];
            }
        }
        let (g_sdf_params, g_cond) = self.sdf_net.backward_batch(&trace.cache_sdf, g_d.view(), upstream)?;
        if train.sdf {
            out.sdf = Some(g_sdf_params);
        }
        let Some(mut g_cond) = g_cond else {
            return Ok(out);
        };
        if let Some(gn) = &g_cond_normal {
            g_cond += gn;
        }

        // ∂L/∂q and ∂L/∂Δ
        let mut g_q = Array2::zeros((n, 3));
        for i in 0..n {
            if !trace.valid[i] {
                continue;
            }
            let r = g_cond.row(i);
            let gq = enc.vjp(trace.deformed[i], &r.as_slice().expect("row-major")[..ed]);
            for c in 0..3 {
                g_q[[i, c]] = gq[c];
            }
        }
        let mut g_delta = g_q.clone();
        if let Some(extra) = grad_displacement {
            check_dim("displacement gradient", n, extra.nrows())?;
            for i in 0..n {
                if trace.valid[i] {
                    for c in 0..3 {
                        g_delta[[i, c]] += extra[[i, c]];
                    }
                }
            }
        }
        let (g_def_params, g_def_in) =
            self.displacement_net
                .backward_batch(&trace.cache_def, g_delta.view(), train.weights)?;
        if train.displacement {
            out.displacement = Some(g_def_params);
        }
        let g_shape_in = match (&self.shape_net, &trace.cache_shape) {
            (Some(net), Some(cache)) if train.shape || train.weights => {
                let (g, gin) = net.backward_batch(cache, g_q.view(), train.weights)?;
                if train.shape {
                    out.shape = Some(g);
                }
                gin
            }
            _ => None,
        };

        if !train.weights {
            return Ok(out);
        }
        let Some(g_def_in) = g_def_in else {
            return Ok(out);
        };
        if trace.cache_w.is_none() {
            return Err(Error::invalid("fixed weights have no network to train"));
        }

        let mut g_w = Array2::zeros((n, k));
        for i in 0..n {
            let Some(u) = &trace.unposed[i] else { continue };
            let ctx = &q.contexts[q.context[i]];
            let gc = g_cond.row(i);
            let gd = g_def_in.row(i);
            let gc = gc.as_slice().expect("row-major");
            let gd = gd.as_slice().expect("row-major");
            let pb = trace.canonical[i];
            // p̄ feeds q directly, both encodings and both canonical offset blocks
            let mut g_pb = row3(&g_q, i) + enc.vjp(pb, &gd[..ed]);
            if let Some(gs) = &g_shape_in {
                g_pb += enc.vjp(pb, &gs.row(i).as_slice().expect("row-major")[..ed]);
            }
            let off = ed + 3 * k;
            for j in 0..k {
                for c in 0..3 {
                    g_pb[c] += gc[off + 3 * j + c] + gd[off + 3 * j + c];
                }
            }
            let mut gw_row = vec![T::zero(); k];
            for (j, rot) in ctx.pose.rotations.iter().enumerate() {
                for c in 0..3 {
                    gw_row[j] += (gc[ed + 3 * j + c] + gd[ed + 3 * j + c]) * rot[c];
                }
            }
            if let (Some(gr), Some(nc)) = (&g_raw_normal, &trace.canonical_normals) {
                let (gr, nc) = (row3(gr, i), row3(nc, i));
                for (j, b) in ctx.transforms.iter().enumerate() {
                    for r in 0..3 {
                        for c in 0..3 {
                            gw_row[j] += gr[r] * b.0[r][c] * nc[c];
                        }
                    }
                }
            }
            u.vjp(g_pb, &ctx.transforms, &mut gw_row);
            for j in 0..k {
                g_w[[i, j]] = gw_row[j];
            }
        }
        let cache_w = trace.cache_w.as_ref().expect("checked above");
        out.weights = Some(self.weight_net.backward_batch(cache_w, g_w.view(), false)?.0);
        Ok(out)
    }

    fn single<'a>(
        points: &'a [Vec3<T>],
        ctx: &'a [PoseContext<T>],
        w: Option<ArrayView2<'a, T>>,
    ) -> Query<'a, T> {
        Query {
            points,
            contexts: ctx,
            context: &[0],
            fixed_weights: w,
        }
    }

    /// Blend weights from the canonical mapping network and the un-posed point.
    pub fn canonical_map(&self, p: Vec3<T>, ctx: &PoseContext<T>) -> Result<(BlendWeights<T>, Vec3<T>)> {
        let pts = [p];
        let t = self.forward(&Self::single(&pts, std::slice::from_ref(ctx), None), false)?;
        let w = BlendWeights::from_simplex_unchecked(t.weights.row(0).to_vec());
        if !t.valid[0] {
            return Err(singular_at(p, &w, ctx));
        }
        Ok((w, t.canonical[0]))
    }

    /// Un-posing with caller-supplied weights instead of the network.
    pub fn canonical_map_with_weights(&self, p: Vec3<T>, w: &BlendWeights<T>, ctx: &PoseContext<T>) -> Result<Vec3<T>> {
        check_dim("blend weights", ctx.joint_count(), w.as_slice().len())?;
        unpose_raw(p, w.as_slice(), &ctx.transforms).map(|u| u.point)
    }

    /// `Δp̄_θ = f_def(enc(p̄), w∘θ, p̄ - j̄)`.
    pub fn pose_displacement(&self, canonical: Vec3<T>, w: &BlendWeights<T>, ctx: &PoseContext<T>) -> Result<Vec3<T>> {
        self.check_context(ctx)?;
        let x = self.conditioning(canonical, canonical, w.as_slice(), ctx);
        let (y, _) = self.displacement_net.forward(&x)?;
        Ok(Vec3([y[0], y[1], y[2]]))
    }

    /// `Δp̄_β = f_def_shape(enc(p̄), β)`.
    pub fn shape_displacement(&self, canonical: Vec3<T>, shape: &[T]) -> Result<Vec3<T>> {
        let net = self
            .shape_net
            .as_ref()
            .ok_or_else(|| Error::config("shape_dim", "single-subject model has no shape branch"))?;
        check_dim("shape code", self.config.shape_dim, shape.len())?;
        let mut x = self.config.encoding.encode(canonical);
        x.extend_from_slice(shape);
        let (y, _) = net.forward(&x)?;
        Ok(Vec3([y[0], y[1], y[2]]))
    }

    fn conditioning(&self, enc_point: Vec3<T>, canonical: Vec3<T>, w: &[T], ctx: &PoseContext<T>) -> Vec<T> {
        let mut x = self.config.encoding.encode(enc_point);
        x.extend(weighted_pose_raw(w, &ctx.pose.rotations));
        for j in &ctx.rest_joints {
            x.extend_from_slice(&(canonical - *j).0);
        }
        x.extend_from_slice(&ctx.shape);
        x
    }

    /// Signed distance `d*` of a posed point.
    pub fn eval_sdf(&self, p: Vec3<T>, ctx: &PoseContext<T>) -> Result<T> {
        let pts = [p];
        let t = self.forward(&Self::single(&pts, std::slice::from_ref(ctx), None), false)?;
        if !t.valid[0] {
            return Err(singular_at(p, &BlendWeights::from_simplex_unchecked(t.weights.row(0).to_vec()), ctx));
        }
        Ok(t.sdf[0])
    }

    /// Posed-space unit normal `n*`.
    pub fn eval_normal(&self, p: Vec3<T>, ctx: &PoseContext<T>) -> Result<Vec3<T>> {
        self.eval_normal_with(p, ctx, None)
    }

    pub fn eval_normal_with(&self, p: Vec3<T>, ctx: &PoseContext<T>, w: Option<&[T]>) -> Result<Vec3<T>> {
        let pts = [p];
        let wv = w.map(|w| ArrayView2::from_shape((1, w.len()), w).expect("row"));
        let t = self.forward(&Self::single(&pts, std::slice::from_ref(ctx), wv), true)?;
        if !t.valid[0] {
            return Err(singular_at(p, &BlendWeights::from_simplex_unchecked(t.weights.row(0).to_vec()), ctx));
        }
        Ok(t.normals.expect("requested")[0])
    }

    /// Batched `d*` over points of one pose; `None` marks singular blends.
    pub fn eval_sdf_batch(
        &self,
        points: &[Vec3<T>],
        ctx: &PoseContext<T>,
        prior: Option<&dyn WeightPrior<T>>,
    ) -> Result<Vec<Option<T>>> {
        let context = vec![0usize; points.len()];
        let fixed = self.prior_weights(points, ctx, prior)?;
        let q = Query {
            points,
            contexts: std::slice::from_ref(ctx),
            context: &context,
            fixed_weights: fixed.as_ref().map(|a| a.view()),
        };
        let t = self.forward(&q, false)?;
        Ok(t.sdf.iter().zip(&t.valid).map(|(d, v)| v.then_some(*d)).collect())
    }

    /// Batched `n*`; `None` where the normal could not be evaluated.
    pub fn eval_normal_batch(
        &self,
        points: &[Vec3<T>],
        ctx: &PoseContext<T>,
        prior: Option<&dyn WeightPrior<T>>,
    ) -> Result<Vec<Option<Vec3<T>>>> {
        let fixed = self.prior_weights(points, ctx, prior)?;
        let context = vec![0usize; points.len()];
        let q = Query {
            points,
            contexts: std::slice::from_ref(ctx),
            context: &context,
            fixed_weights: fixed.as_ref().map(|a| a.view()),
        };
        match self.forward(&q, true) {
            Ok(t) => Ok(t
                .normals
                .expect("requested")
                .into_iter()
                .zip(&t.valid)
                .map(|(n, v)| v.then_some(n))
                .collect()),
            // one degenerate vector poisons the batch; fall back point by point
            Err(Error::DegenerateNormal(_)) => Ok(points
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let w = fixed.as_ref().map(|a| a.row(i).to_vec());
                    self.eval_normal_with(*p, ctx, w.as_deref()).ok()
                })
                .collect()),
            Err(e) => Err(e),
        }
    }

    /// Weights from `prior` when the model runs in nearest-surface mode.
    pub fn prior_weights(
        &self,
        points: &[Vec3<T>],
        ctx: &PoseContext<T>,
        prior: Option<&dyn WeightPrior<T>>,
    ) -> Result<Option<Array2<T>>> {
        match self.weight_mode {
            WeightMode::Learned => Ok(None),
            WeightMode::NearestSurface => {
                let prior = prior.ok_or_else(|| Error::invalid("nearest-surface weights need a body prior"))?;
                let k = self.joint_count();
                let mut a = Array2::zeros((points.len(), k));
                for (mut row, p) in a.axis_iter_mut(Axis(0)).zip(points) {
                    let w = prior.weights(*p, ctx);
                    check_dim("prior weights", k, w.len())?;
                    row.assign(&ndarray::ArrayView1::from(&w));
                }
                Ok(Some(a))
            }
        }
    }

    pub fn cast<U: Real>(&self) -> NeuralGif<U> {
        NeuralGif {
            skeleton: self.skeleton.cast(),
            config: self.config.clone(),
            weight_mode: self.weight_mode,
            weight_net: self.weight_net.cast(),
            displacement_net: self.displacement_net.cast(),
            sdf_net: self.sdf_net.cast(),
            normal_net: self.normal_net.cast(),
            shape_net: self.shape_net.as_ref().map(Mlp::cast),
        }
    }
}

fn singular_at<T: Real>(p: Vec3<T>, w: &BlendWeights<T>, ctx: &PoseContext<T>) -> Error {
    let m = blend_raw(w.as_slice(), &ctx.transforms);
    let condition = m
        .inverse_with_condition()
        .map_or(f64::INFINITY, |(_, c)| c.as_f64());
    let [x, y, z] = p.to_f64();
    Error::SingularBlend { x, y, z, condition }
}

#[inline]
pub(crate) fn row3<T: Real>(a: &Array2<T>, i: usize) -> Vec3<T> {
    Vec3([a[[i, 0]], a[[i, 1]], a[[i, 2]]])
}

/// Mean absolute SDF error plus `λ·mean‖Δ‖²` on a fixed point set, plus the
/// mean of `1 - nᵀn*` when normal targets are given; used to
/// finite-difference the full composition.
pub struct SdfLossProbe<'a, T: Real> {
    pub model: NeuralGif<T>,
    pub points: &'a [Vec3<T>],
    pub contexts: &'a [PoseContext<T>],
    pub context: &'a [usize],
    pub targets: &'a [T],
    pub reg_weight: T,
    pub normal_targets: Option<&'a [Vec3<T>]>,
    pub train: Trainable,
}

impl<'a, T: Real> SdfLossProbe<'a, T> {
    fn query(&self) -> Query<'a, T> {
        Query {
            points: self.points,
            contexts: self.contexts,
            context: self.context,
            fixed_weights: None,
        }
    }

    fn nets(&self) -> Vec<&Mlp<T>> {
        let m = &self.model;
        let mut v = Vec::new();
        if self.train.weights {
            v.push(&m.weight_net);
        }
        if self.train.displacement {
            v.push(&m.displacement_net);
        }
        if self.train.sdf {
            v.push(&m.sdf_net);
        }
        if self.train.shape {
            v.extend(m.shape_net.as_ref());
        }
        if self.train.normal {
            v.push(&m.normal_net);
        }
        v
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (n, net) in self.nets().iter().enumerate() {
            if i < net.param_count() {
                return (n, i);
            }
            i -= net.param_count();
        }
        panic!("parameter index out of range")
    }

    fn value(&self, t: &Trace<T>) -> T {
        let n = T::from_usize_lossy(self.points.len());
        let mut l = T::zero();
        for i in 0..self.points.len() {
            l += (t.sdf[i] - self.targets[i]).abs() / n;
            l += self.reg_weight * row3(&t.displacement, i).norm_squared() / n;
        }
        if let (Some(gt), Some(pred)) = (self.normal_targets, &t.normals) {
            for (g, p) in gt.iter().zip(pred) {
                l += (T::one() - g.dot(*p)) / n;
            }
        }
        l
    }
}

impl<T: Real> crate::nets::GradTarget<T> for SdfLossProbe<'_, T> {
    fn param_count(&self) -> usize {
        self.nets().iter().map(|n| n.param_count()).sum()
    }

    fn param(&self, i: usize) -> T {
        let (n, j) = self.locate(i);
        self.nets()[n].param(j)
    }

    fn set_param(&mut self, i: usize, v: T) {
        let (n, j) = self.locate(i);
        let train = self.train;
        let m = &mut self.model;
        let mut nets: Vec<&mut Mlp<T>> = Vec::new();
        if train.weights {
            nets.push(&mut m.weight_net);
        }
        if train.displacement {
            nets.push(&mut m.displacement_net);
        }
        if train.sdf {
            nets.push(&mut m.sdf_net);
        }
        if train.shape {
            nets.extend(m.shape_net.as_mut());
        }
        if train.normal {
            nets.push(&mut m.normal_net);
        }
        nets[n].set_param(j, v);
    }

    fn loss_and_grad(&self) -> Result<(T, Vec<T>)> {
        let q = self.query();
        let t = self.model.forward(&q, self.normal_targets.is_some())?;
        let n = T::from_usize_lossy(self.points.len());
        let g_n: Option<Vec<Vec3<T>>> = self.normal_targets.map(|gt| gt.iter().map(|g| g.scale(-T::one() / n)).collect());
        let g_d: Vec<T> = t
            .sdf
            .iter()
            .zip(self.targets)
            .map(|(d, g)| (*d - *g).signum() / n)
            .collect();
        let g_reg = t.displacement.mapv(|v| T::lit(2.0) * self.reg_weight * v / n);
        let g = self.model.backward(&q, &t, &g_d, Some(&g_reg), g_n.as_deref(), self.train)?;
        let mut flat = Vec::new();
        for part in [&g.weights, &g.displacement, &g.sdf, &g.shape, &g.normal] {
            if let Some(p) = part {
                flat.extend(p.flat());
            }
        }
        Ok((self.value(&t), flat))
    }

    fn loss(&self) -> Result<T> {
        let t = self.model.forward(&self.query(), self.normal_targets.is_some())?;
        Ok(self.value(&t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mini_config(shape_dim: usize) -> ModelConfig {
        ModelConfig {
            encoding: EncodingConfig {
                frequencies: 2,
                include_input: true,
            },
            weight_hidden: vec![16, 16],
            displacement_hidden: vec![16, 16],
            sdf_hidden: vec![16, 16],
            normal_hidden: vec![16],
            shape_hidden: vec![16],
            softplus_beta: 100.0,
            sdf_init_bias: 0.1,
            shape_dim,
        }
    }

    fn two_joint() -> Skeleton<f64> {
        Skeleton::new(
            vec![None, Some(0)],
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, 0.4, 0.0)],
        )
        .unwrap()
    }

    fn bent_pose() -> Pose<f64> {
        let mut pose = Pose::identity(2);
        pose.rotations[0] = Vec3::new(0.05, 0.1, -0.02);
        pose.rotations[1] = Vec3::new(0.0, 0.2, 0.7);
        pose
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3<f64>> {
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.2..0.8), rng.gen_range(-0.3..0.3)))
            .collect()
    }

    /// Gives the zero-initialized last layers random values so every path carries gradient.
    fn randomize_last_layers(model: &mut NeuralGif<f64>, rng: &mut ChaCha8Rng) {
        for net in [&mut model.displacement_net].into_iter().chain(model.shape_net.as_mut()) {
            let layers = net.layers_mut();
            let last = layers.last_mut().unwrap();
            last.weight.mapv_inplace(|_| rng.gen_range(-0.05..0.05));
            last.bias.mapv_inplace(|_| rng.gen_range(-0.01..0.01));
        }
    }

    #[test]
    fn identity_pose_maps_points_to_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = NeuralGif::new(two_joint(), mini_config(0), &mut rng).unwrap();
        let ctx = model.context(&Pose::identity(2), None).unwrap();
        for p in random_points(&mut rng, 50) {
            let (w, pb) = model.canonical_map(p, &ctx).unwrap();
            assert!((pb - p).norm() < 1e-6);
            assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(w.as_slice().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn forced_one_hot_is_rigid_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = NeuralGif::new(two_joint(), mini_config(0), &mut rng).unwrap();
        let ctx = model.context(&bent_pose(), None).unwrap();
        for p in random_points(&mut rng, 20) {
            let pb = model
                .canonical_map_with_weights(p, &BlendWeights::one_hot(2, 1), &ctx)
                .unwrap();
            let inv = ctx.transforms[1].try_inverse().unwrap();
            assert!((pb - inv.transform_point(p)).norm() < 1e-9);
        }
    }

    #[test]
    fn fresh_displacement_fields_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = NeuralGif::new(two_joint(), mini_config(2), &mut rng).unwrap();
        let ctx = model.context(&bent_pose(), Some(&[0.3, -0.1])).unwrap();
        for p in random_points(&mut rng, 10) {
            let (w, pb) = model.canonical_map(p, &ctx).unwrap();
            assert_eq!(model.pose_displacement(pb, &w, &ctx).unwrap(), Vec3::zero());
            let a = model.shape_displacement(pb, &[0.3, -0.1]).unwrap();
            assert_eq!(a, Vec3::zero());
        }
    }

    #[test]
    fn shape_branch_requires_shape_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let single = NeuralGif::new(two_joint(), mini_config(0), &mut rng).unwrap();
        assert!(matches!(
            single.shape_displacement(Vec3::zero(), &[1.0]),
            Err(Error::Config { .. })
        ));
        let mut multi = NeuralGif::new(two_joint(), mini_config(2), &mut rng).unwrap();
        randomize_last_layers(&mut multi, &mut rng);
        let a = multi.shape_displacement(Vec3::new(0.1, 0.2, 0.0), &[0.5, 0.5]).unwrap();
        let b = multi.shape_displacement(Vec3::new(0.1, 0.2, 0.0), &[0.5, 0.5]).unwrap();
        assert_eq!(a, b);
        assert!(multi.context(&Pose::identity(2), None).is_err());
    }

    #[test]
    fn degenerates_to_canonical_sdf_without_pose_or_displacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = NeuralGif::new(two_joint(), mini_config(0), &mut rng).unwrap();
        let ctx = model.context(&Pose::identity(2), None).unwrap();
        for p in random_points(&mut rng, 20) {
            let d = model.eval_sdf(p, &ctx).unwrap();
            // w∘θ vanishes for the identity pose, so the weights drop out
            let x = model.conditioning(p, p, &[0.5, 0.5], &ctx);
            let (raw, _) = model.sdf_net.forward(&x).unwrap();
            assert!((d - raw[0]).abs() < 1e-9);
            assert_eq!(d.to_bits(), model.eval_sdf(p, &ctx).unwrap().to_bits());
        }
    }

    #[test]
    fn normals_follow_rotation_block_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = NeuralGif::new(two_joint(), mini_config(0), &mut rng).unwrap();
        let id = model.context(&Pose::identity(2), None).unwrap();
        let p = Vec3::new(0.1, 0.3, 0.05);
        let n_id = model.eval_normal(p, &id).unwrap();
        let (w, pb) = model.canonical_map(p, &id).unwrap();
        let x = model.conditioning(pb, pb, w.as_slice(), &id);
        let (nc, _) = model.normal_net.forward(&x).unwrap();
        assert!((n_id - Vec3([nc[0], nc[1], nc[2]])).norm() < 1e-9);

        let ctx = model.context(&bent_pose(), None).unwrap();
        let hot = [0.0, 1.0];
        let n = model.eval_normal_with(p, &ctx, Some(&hot)).unwrap();
        let pb = model.canonical_map_with_weights(p, &BlendWeights::one_hot(2, 1), &ctx).unwrap();
        let x = model.conditioning(pb, pb, &hot, &ctx);
        let (nc, _) = model.normal_net.forward(&x).unwrap();
        let expect = ctx.transforms[1].linear().mul_vec(Vec3([nc[0], nc[1], nc[2]]));
        assert!((n - expect).norm() < 1e-6);
        assert!((n.norm() - 1.0).abs() < 1e-6);

        // translation-only change of B: canonical point moves with it, so compare the
        // transform step itself on a fixed canonical normal
        let mut shifted = ctx.clone();
        for b in &mut shifted.transforms {
            for r in 0..3 {
                b.0[r][3] += 0.37;
            }
        }
        let v = Vec3::new(0.2, -0.5, 0.8);
        let a = blend_raw(&[0.3, 0.7], &ctx.transforms).linear().mul_vec(v);
        let b = blend_raw(&[0.3, 0.7], &shifted.transforms).linear().mul_vec(v);
        assert_eq!(a, b);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = NeuralGif::new(two_joint(), mini_config(0), &mut rng).unwrap();
        randomize_last_layers(&mut model, &mut rng);
        let poses = [bent_pose(), Pose::identity(2)];
        let contexts: Vec<_> = poses.iter().map(|p| model.context(p, None).unwrap()).collect();
        let points = random_points(&mut rng, 6);
        let context: Vec<usize> = (0..6).map(|i| i % 2).collect();
        let targets: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let mut probe = SdfLossProbe {
            model,
            points: &points,
            contexts: &contexts,
            context: &context,
            targets: &targets,
            reg_weight: 0.5,
            normal_targets: None,
            train: Trainable {
                weights: true,
                displacement: true,
                sdf: true,
                ..Default::default()
            },
        };
        let err = gradient_check(&mut probe, 300, 1e-4, 11).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn normal_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = NeuralGif::new(two_joint(), mini_config(0), &mut rng).unwrap();
        randomize_last_layers(&mut model, &mut rng);
        let contexts = vec![model.context(&bent_pose(), None).unwrap()];
        let points = random_points(&mut rng, 5);
        let context = vec![0; 5];
        let targets = vec![0.1, -0.05, 0.0, 0.2, -0.1];
        let normals: Vec<Vec3<f64>> = (0..5)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.5).try_normalize(1e-12).unwrap())
            .collect();
        let mut probe = SdfLossProbe {
            model,
            points: &points,
            contexts: &contexts,
            context: &context,
            targets: &targets,
            reg_weight: 0.2,
            normal_targets: Some(&normals),
            train: Trainable {
                weights: true,
                displacement: true,
                sdf: true,
                normal: true,
                ..Default::default()
            },
        };
        let err = gradient_check(&mut probe, 300, 1e-4, 13).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn shape_branch_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = NeuralGif::new(two_joint(), mini_config(2), &mut rng).unwrap();
        randomize_last_layers(&mut model, &mut rng);
        let contexts = vec![model.context(&bent_pose(), Some(&[0.4, -0.7])).unwrap()];
        let points = random_points(&mut rng, 4);
        let context = vec![0; 4];
        let targets = vec![0.05, -0.02, 0.2, 0.0];
        let mut probe = SdfLossProbe {
            model,
            points: &points,
            contexts: &contexts,
            context: &context,
            targets: &targets,
            reg_weight: 0.1,
            normal_targets: None,
            train: Trainable {
                weights: true,
                displacement: true,
                sdf: true,
                shape: true,
                normal: false,
            },
        };
        let err = gradient_check(&mut probe, 300, 1e-4, 12).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
