//! Python bindings for the dfcvae crate.

use ndarray::prelude::*;
use numpy::{IntoPyArray, PyArray1, PyArray2, PyArray4, PyReadonlyArray1, PyReadonlyArray2, PyReadonlyArray4};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dfcvae::core_model::{
    init_params, load_checkpoint, reparameterize_batch, save_checkpoint, Checkpoint,
    DecoderParams, EncoderParams, Mode, ModelConfig,
};
use dfcvae::loss_network::{load_loss_network, random_vgg19_archive, LossNetwork};
use dfcvae::losses::{total_loss, LossConfig, LossMode};

fn err(e: dfcvae::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A convolutional VAE: encoder, decoder and their configuration.
#[pyclass]
struct Model {
    config: ModelConfig,
    encoder: EncoderParams,
    decoder: DecoderParams,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (latent_dim=100, image_side=64, seed=0, encoder_channels=None, decoder_channels=None))]
    fn new(
        latent_dim: usize,
        image_side: usize,
        seed: u64,
        encoder_channels: Option<Vec<usize>>,
        decoder_channels: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let d = ModelConfig::default();
        let config = ModelConfig {
            latent_dim,
            image_side,
            encoder_channels: encoder_channels.unwrap_or(d.encoder_channels),
            decoder_channels: decoder_channels.unwrap_or(d.decoder_channels),
            ..d
        };
        let (encoder, decoder) = init_params(&config, seed).map_err(err)?;
        Ok(Model { config, encoder, decoder })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = load_checkpoint(path).map_err(err)?;
        Ok(Model {
            config: ckpt.model_config,
            encoder: ckpt.encoder,
            decoder: ckpt.decoder,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let ckpt = Checkpoint {
            model_config: self.config.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            trainer_state: None,
            loss_config_snapshot: LossConfig::default(),
            format_version: dfcvae::core_model::CHECKPOINT_FORMAT_VERSION,
        };
        save_checkpoint(&ckpt, path).map_err(err)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    #[getter]
    fn image_side(&self) -> usize {
        self.config.image_side
    }

    /// Encode a (B, 3, H, W) batch; returns (mu, logvar), each (B, latent).
    fn encode<'py>(
        &self,
        py: Python<'py>,
        x: PyReadonlyArray4<'py, f64>,
    ) -> PyResult<(Bound<'py, PyArray2<f64>>, Bound<'py, PyArray2<f64>>)> {
        let (mu, logvar, _) = self
            .encoder
            .forward(&x.as_array().to_owned(), Mode::Eval)
            .map_err(err)?;
        Ok((mu.into_pyarray(py), logvar.into_pyarray(py)))
    }

    /// Draw z = mu + eps * exp(logvar / 2) with a seeded generator.
    fn reparameterize<'py>(
        &self,
        py: Python<'py>,
        mu: PyReadonlyArray2<'py, f64>,
        logvar: PyReadonlyArray2<'py, f64>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let mu = mu.as_array().to_owned();
        let logvar = logvar.as_array().to_owned();
        if mu.dim() != logvar.dim() {
            return Err(PyValueError::new_err("mu and logvar shapes differ"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (z, _eps) = reparameterize_batch(&mu, &logvar, &mut rng);
        Ok(z.into_pyarray(py))
    }

    /// Decode (B, latent) codes to a (B, 3, H, W) batch.
    fn decode<'py>(
        &self,
        py: Python<'py>,
        z: PyReadonlyArray2<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray4<f64>>> {
        let y = dfcvae::core_model::decode(&self.decoder, &z.as_array().to_owned(), Mode::Eval)
            .map_err(err)?;
        Ok(y.into_pyarray(py))
    }

    /// Decode n latents drawn from the prior.
    fn sample<'py>(
        &self,
        py: Python<'py>,
        n: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyArray4<f64>>> {
        let y = dfcvae::core_model::sample_images(&self.decoder, n, seed).map_err(err)?;
        Ok(y.into_pyarray(py))
    }
}

/// Frozen feature extractor used by the perceptual reconstruction loss.
#[pyclass]
struct LossNet {
    inner: LossNetwork,
    taps: Vec<String>,
}

#[pymethods]
impl LossNet {
    #[staticmethod]
    fn load(path: &str, taps: Vec<String>) -> PyResult<Self> {
        let inner = load_loss_network(path, &taps).map_err(err)?;
        Ok(LossNet { inner, taps })
    }

    /// Feature maps at the tapped layers, keyed by tag.
    fn features<'py>(
        &self,
        py: Python<'py>,
        x: PyReadonlyArray4<'py, f64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let feats = self
            .inner
            .extract_features(&x.as_array().to_owned())
            .map_err(err)?;
        let out = PyDict::new(py);
        for (tag, fm) in feats.maps {
            out.set_item(tag, fm.data.into_pyarray(py))?;
        }
        Ok(out)
    }

    #[getter]
    fn taps(&self) -> Vec<String> {
        self.taps.clone()
    }
}

/// Write a randomly initialized loss-network weight archive (for tests).
#[pyfunction]
fn write_random_weights(path: &str, block_widths: [usize; 5], seed: u64) -> PyResult<()> {
    random_vgg19_archive(&block_widths, seed)
        .save(path)
        .map_err(err)
}

#[pyfunction]
fn kl_loss(mu: PyReadonlyArray2<f64>, logvar: PyReadonlyArray2<f64>) -> PyResult<f64> {
    dfcvae::losses::kl_loss(&mu.as_array().to_owned(), &logvar.as_array().to_owned())
        .map_err(err)
}

#[pyfunction]
fn pixel_loss(x: PyReadonlyArray4<f64>, xbar: PyReadonlyArray4<f64>) -> PyResult<f64> {
    dfcvae::losses::pixel_loss(&x.as_array().to_owned(), &xbar.as_array().to_owned())
        .map_err(err)
}

/// Full objective; returns a dict with kl, per-layer and total terms.
#[pyfunction]
#[pyo3(signature = (x, xbar, mu, logvar, net=None, alpha=1.0, beta=0.5))]
#[allow(clippy::too_many_arguments)]
fn loss_breakdown<'py>(
    py: Python<'py>,
    x: PyReadonlyArray4<'py, f64>,
    xbar: PyReadonlyArray4<'py, f64>,
    mu: PyReadonlyArray2<'py, f64>,
    logvar: PyReadonlyArray2<'py, f64>,
    net: Option<&LossNet>,
    alpha: f64,
    beta: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = match net {
        Some(n) => LossConfig {
            alpha,
            beta,
            mode: LossMode::Dfc,
            tap_tags: n.taps.clone(),
        },
        None => LossConfig {
            alpha,
            beta,
            mode: LossMode::Pixel,
            tap_tags: Vec::new(),
        },
    };
    let bd = total_loss(
        &x.as_array().to_owned(),
        &xbar.as_array().to_owned(),
        &mu.as_array().to_owned(),
        &logvar.as_array().to_owned(),
        net.map(|n| &n.inner),
        &cfg,
    )
    .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("kl", bd.kl)?;
    out.set_item("rec_total", bd.rec_total)?;
    out.set_item("total", bd.total)?;
    let per = PyDict::new(py);
    for (tag, v) in &bd.per_layer_rec {
        per.set_item(tag, *v)?;
    }
    out.set_item("per_layer_rec", per)?;
    Ok(out)
}

/// Linear interpolation between two latent vectors at the given alphas.
#[pyfunction]
fn interpolate<'py>(
    py: Python<'py>,
    z_left: PyReadonlyArray1<'py, f64>,
    z_right: PyReadonlyArray1<'py, f64>,
    alphas: Vec<f64>,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let zs = dfcvae::latent_toolkit::interpolate(
        &z_left.as_array().to_owned(),
        &z_right.as_array().to_owned(),
        &alphas,
    )
    .map_err(err)?;
    let dim = z_left.as_array().len();
    let mut out = Array2::<f64>::zeros((zs.len(), dim));
    for (i, z) in zs.iter().enumerate() {
        out.row_mut(i).assign(z);
    }
    Ok(out.into_pyarray(py))
}

/// Difference of latent means between two groups (an attribute vector).
#[pyfunction]
fn attribute_vector<'py>(
    py: Python<'py>,
    pos: PyReadonlyArray2<'py, f64>,
    neg: PyReadonlyArray2<'py, f64>,
) -> PyResult<Bound<'py, PyArray1<f64>>> {
    let v = dfcvae::latent_toolkit::attribute_vector_from_latents(
        &pos.as_array().to_owned(),
        &neg.as_array().to_owned(),
        "attr",
    )
    .map_err(err)?;
    Ok(v.vector.into_pyarray(py))
}

#[pymodule]
fn dfcvae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<LossNet>()?;
    m.add_function(wrap_pyfunction!(write_random_weights, m)?)?;
    m.add_function(wrap_pyfunction!(kl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_loss, m)?)?;
    m.add_function(wrap_pyfunction!(loss_breakdown, m)?)?;
    m.add_function(wrap_pyfunction!(interpolate, m)?)?;
    m.add_function(wrap_pyfunction!(attribute_vector, m)?)?;
    Ok(())
}
