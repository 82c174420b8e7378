"""The three networks: patch quantum generator, convolutional encoder, critic.

The generator splits a 28x28 image into 14 horizontal strips of 2x28 pixels.
Sub-generator j owns strip j: its post-selected measurement distribution is
rescaled by its own maximum, the first 56 entries become the strip's pixels,
and the strips are concatenated top to bottom.  The whole thing is exposed
to the autodiff tape as a single custom op whose backward calls the exact
adjoint gradients from the simulator.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn, qsim


@dataclass
class GeneratorConfig:
    n_subgens: int = 14
    n_qubits: int = 7
    n_ancilla: int = 1
    layers: int = 12
    image_height: int = 28
    image_width: int = 28

    @property
    def n_data(self) -> int:
        return self.n_qubits - self.n_ancilla

    @property
    def n_pixels(self) -> int:
        return self.image_height * self.image_width

    @property
    def patch_pixels(self) -> int:
        return self.n_pixels // self.n_subgens

    def validate(self):
        if self.n_ancilla < 0 or self.n_ancilla >= self.n_qubits:
            raise ValueError("ancilla count must be in [0, n_qubits)")
        if self.n_pixels % self.n_subgens != 0:
            raise ValueError("image size must divide evenly into patches")
        if self.patch_pixels > 2 ** self.n_data:
            raise ValueError(
                f"patch of {self.patch_pixels} pixels needs at least "
                f"{self.patch_pixels} data-register outcomes, have {2 ** self.n_data}"
            )
        return self


@dataclass
class GeneratorParams:
    config: GeneratorConfig
    thetas: list = field(default_factory=list)  # one (layers, n, 3) Tensor per sub-generator

    def parameters(self):
        return list(self.thetas)

    def n_parameters(self) -> int:
        return sum(t.size for t in self.thetas)


def init_generator(config: GeneratorConfig, rng: np.random.Generator) -> GeneratorParams:
    """Angles drawn uniformly from [0, 2*pi)."""
    config.validate()
    shape = (config.layers, config.n_qubits, 3)
    thetas = [nn.Tensor(rng.uniform(0.0, 2.0 * np.pi, size=shape), requires_grad=True)
              for _ in range(config.n_subgens)]
    return GeneratorParams(config, thetas)


def patch_postprocess(probs: np.ndarray, n_pixels: int) -> np.ndarray:
    """Rescale by the distribution's max, then keep the first n_pixels entries."""
    m = probs.max(axis=-1, keepdims=True)
    return probs[..., :n_pixels] / m


def patch_postprocess_backward(probs: np.ndarray, n_pixels: int,
                               upstream: np.ndarray) -> np.ndarray:
    """Gradient of sum(upstream * patch_postprocess(probs)) w.r.t. probs.

    The max is an a.e.-differentiable selection; its gradient routes the
    term -(sum_i u_i y_i) / max to the argmax slot.
    """
    m = probs.max(axis=-1, keepdims=True)
    arg = probs.argmax(axis=-1)
    grad = np.zeros_like(probs)
    grad[..., :n_pixels] = upstream / m
    pixels = probs[..., :n_pixels] / m
    correction = (upstream * pixels).sum(axis=-1) / m[..., 0]
    np.add.at(grad.reshape(-1, probs.shape[-1]),
              (np.arange(arg.size), arg.reshape(-1)), -correction.reshape(-1))
    return grad


def _subgen_forward(z_data, theta_data, n_ancilla, n_pix):
    state = qsim.run_subgenerator(z_data, theta_data)
    probs, _ = qsim.postselect_probs(state, n_ancilla)
    return state, probs, patch_postprocess(probs, n_pix)


def generate(z: nn.Tensor, gen: GeneratorParams, threads: int = 1) -> nn.Tensor:
    """Batched images from latents.  z (B, n_qubits) -> (B, H*W) in [0, 1].

    ``threads`` only parallelises the independent sub-generator circuits;
    each writes its own output slot, so results are bitwise identical for
    any thread count.
    """
    cfg = gen.config
    B = z.data.shape[0]
    n_pix = cfg.patch_pixels
    probs_cache = [None] * cfg.n_subgens
    state_cache = [None] * cfg.n_subgens
    out = np.empty((B, cfg.n_pixels))

    def run(j):
        state, probs, pixels = _subgen_forward(z.data, gen.thetas[j].data,
                                                cfg.n_ancilla, n_pix)
        state_cache[j] = state
        probs_cache[j] = probs
        out[:, j * n_pix:(j + 1) * n_pix] = pixels

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, range(cfg.n_subgens)))
    else:
        for j in range(cfg.n_subgens):
            run(j)

    def bw(g):
        grad_z = np.zeros_like(z.data)
        grads_theta = [None] * cfg.n_subgens

        def back(j):
            up = patch_postprocess_backward(probs_cache[j], n_pix,
                                            g[:, j * n_pix:(j + 1) * n_pix])
            gz, ga = qsim.subgen_backward(z.data, gen.thetas[j].data, up,
                                          cfg.n_ancilla,
                                          final_state=state_cache[j])
            grads_theta[j] = ga.sum(axis=0)
            return gz

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(back, range(cfg.n_subgens)))
        else:
            parts = [back(j) for j in range(cfg.n_subgens)]
        for gz in parts:  # fixed-order reduction keeps results thread-count invariant
            grad_z = grad_z + gz
        nn.accumulate_grad(z, grad_z)
        for j in range(cfg.n_subgens):
            nn.accumulate_grad(gen.thetas[j], grads_theta[j])

    return nn.custom_op(out, (z, *gen.thetas), bw)


@dataclass
class EncoderParams:
    conv_w: list
    conv_b: list
    fc_w: nn.Tensor
    fc_b: nn.Tensor
    mu_w: nn.Tensor
    mu_b: nn.Tensor
    logvar_w: nn.Tensor
    logvar_b: nn.Tensor
    input_hw: int = 28
    slope: float = 0.2

    def parameters(self):
        out = []
        for w, b in zip(self.conv_w, self.conv_b):
            out.extend([w, b])
        out.extend([self.fc_w, self.fc_b, self.mu_w, self.mu_b,
                    self.logvar_w, self.logvar_b])
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _conv_out_hw(hw: int, n_layers: int, kernel: int = 4, stride: int = 2,
                 padding: int = 1) -> int:
    for _ in range(n_layers):
        hw = (hw + 2 * padding - kernel) // stride + 1
    return hw


def init_encoder(rng: np.random.Generator, latent_dim: int, input_hw: int = 28,
                 channels=(32, 64, 128), hidden: int = 128,
                 slope: float = 0.2) -> EncoderParams:
    """Three strided conv layers, a dense hidden layer, then mu / logvar heads.

    Weights are Kaiming-normal with fan_in = incoming connections per unit;
    biases start at zero.
    """
    kernel = 4
    conv_w, conv_b = [], []
    in_ch = 1
    for out_ch in channels:
        fan_in = in_ch * kernel * kernel
        conv_w.append(nn.Tensor(nn.kaiming_normal(rng, (out_ch, in_ch, kernel, kernel),
                                                  fan_in), requires_grad=True))
        conv_b.append(nn.Tensor(np.zeros(out_ch), requires_grad=True))
        in_ch = out_ch
    hw = _conv_out_hw(input_hw, len(channels))
    flat = channels[-1] * hw * hw
    fc_w = nn.Tensor(nn.kaiming_normal(rng, (hidden, flat), flat), requires_grad=True)
    fc_b = nn.Tensor(np.zeros(hidden), requires_grad=True)
    mu_w = nn.Tensor(nn.kaiming_normal(rng, (latent_dim, hidden), hidden), requires_grad=True)
    mu_b = nn.Tensor(np.zeros(latent_dim), requires_grad=True)
    lv_w = nn.Tensor(nn.kaiming_normal(rng, (latent_dim, hidden), hidden), requires_grad=True)
    lv_b = nn.Tensor(np.zeros(latent_dim), requires_grad=True)
    return EncoderParams(conv_w, conv_b, fc_w, fc_b, mu_w, mu_b, lv_w, lv_b,
                         input_hw=input_hw, slope=slope)


def encode(x: np.ndarray, enc: EncoderParams):
    """Posterior parameters for a batch of images.  x (B, H*W) -> (mu, logvar)."""
    B = x.shape[0]
    hw = enc.input_hw
    h = nn.Tensor(x.reshape(B, 1, hw, hw))
    for w, b in zip(enc.conv_w, enc.conv_b):
        h = nn.leaky_relu(nn.conv2d(h, w, b, stride=2, padding=1), enc.slope)
    h = nn.reshape(h, (B, h.size // B))
    h = nn.leaky_relu(nn.dense(h, enc.fc_w, enc.fc_b), enc.slope)
    mu = nn.dense(h, enc.mu_w, enc.mu_b)
    logvar = nn.dense(h, enc.logvar_w, enc.logvar_b)
    return mu, logvar


def reparameterize(mu: nn.Tensor, logvar: nn.Tensor, eps: np.ndarray) -> nn.Tensor:
    """z = mu + exp(logvar / 2) * eps with externally supplied noise."""
    return nn.add(mu, nn.mul(nn.texp(nn.mul(logvar, 0.5)), nn.Tensor(eps)))


@dataclass
class CriticParams:
    weights: list
    biases: list
    slope: float = 0.2

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def init_critic(rng: np.random.Generator, input_dim: int = 784,
                hidden=(512, 256), slope: float = 0.2) -> CriticParams:
    dims = [input_dim, *hidden, 1]
    weights, biases = [], []
    for i in range(len(dims) - 1):
        weights.append(nn.Tensor(nn.kaiming_normal(rng, (dims[i + 1], dims[i]), dims[i]),
                                 requires_grad=True))
        biases.append(nn.Tensor(np.zeros(dims[i + 1]), requires_grad=True))
    return CriticParams(weights, biases, slope=slope)


def criticize(x, critic: CriticParams) -> nn.Tensor:
    """Critic scores.  x is a Tensor or array of shape (B, input_dim) -> (B, 1)."""
    h = x if isinstance(x, nn.Tensor) else nn.Tensor(x)
    last = len(critic.weights) - 1
    for i, (w, b) in enumerate(zip(critic.weights, critic.biases)):
        h = nn.dense(h, w, b)
        if i != last:
            h = nn.leaky_relu(h, critic.slope)
    return h


def critic_input_gradient(x_data: np.ndarray, critic: CriticParams) -> nn.Tensor:
    """d(critic)/d(input) at x_data, as a tape expression in the critic weights.

    The leaky-ReLU derivative masks are evaluated at x_data and treated as
    constants, which is exact almost everywhere; the result participates in
    further tape ops, so the gradient penalty reaches the weights without
    second-order autodiff.
    """
    masks = []
    h = x_data
    last = len(critic.weights) - 1
    for i, (w, b) in enumerate(zip(critic.weights, critic.biases)):
        h = h @ w.data.T + b.data
        if i != last:
            masks.append(np.where(h > 0.0, 1.0, critic.slope))
            h = h * masks[-1]

    B = x_data.shape[0]
    g = nn.Tensor(np.ones((B, 1)))
    for i in range(last, -1, -1):
        g = nn.matmul(g, critic.weights[i])  # (B, fan_in of layer i)
        if i > 0:
            g = nn.mul(g, nn.Tensor(masks[i - 1]))
    return g
