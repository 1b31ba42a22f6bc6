"""Frozen LLM codebook and the token-pyramid vector quantizer."""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch.autograd import Function

from formats.embedding import read_embeddings, read_vocab, write_embeddings, write_vocab
from validator import ValidationError

# Candidates whose kernel distance is within this relative slack of the best are re-ranked exactly.
DISTANCE_RTOL = 1e-5
LOOKUP_CHUNK = 4096

# Leading tokens of the desk codebook, so desk explain reports read like words.
DESK_WORDS = (
    "ct", "dose", "abdominal", "liver", "organ", "kidney", "spine", "bone",
    "fat", "air", "tissue", "vessel", "lesion", "cancer", "contrast", "noise",
    "soft", "dense", "bowel", "muscle", "aorta", "spleen", "stomach", "scan",
)


@dataclass
class LlmCodebook:
    """Token strings paired with a frozen |V| x d embedding table."""
    tokens: list[str]
    embeddings: torch.Tensor
    frozen: bool = True
    _index: dict = field(default_factory=dict, init=False, repr=False)
    _sq_norms: torch.Tensor = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if len(self.tokens) < 2:
            raise ValidationError(f"Codebook needs at least 2 tokens, got {len(self.tokens)}")
        seen = {}
        for i, t in enumerate(self.tokens):
            if t in seen:
                raise ValidationError(f"Duplicate token '{t}' at ids {seen[t]} and {i}")
            seen[t] = i
        emb = self.embeddings
        if isinstance(emb, torch.Tensor):
            emb = emb.detach().to(torch.float32)
        else:
            emb = torch.from_numpy(np.array(emb, dtype=np.float32))
        if emb.ndim != 2 or emb.shape[1] < 1:
            raise ValidationError(f"Embedding table must be |V| x d with d >= 1, got {tuple(emb.shape)}")
        if emb.shape[0] != len(self.tokens):
            raise ValidationError(
                f"Dimension mismatch: {len(self.tokens)} tokens but {emb.shape[0]} embedding rows"
            )
        if not torch.isfinite(emb).all():
            raise ValidationError("Codebook embeddings contain non-finite entries")
        self.embeddings = emb.clone().contiguous().requires_grad_(False)
        self._index = seen
        self._sq_norms = (self.embeddings.double() ** 2).sum(dim=1)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    def token_id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise ValidationError(f"Unknown token '{token}'")

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < self.size:
            raise ValidationError(f"Token id {token_id} outside [0, {self.size})")
        return self.tokens[token_id]

    def table(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return self.embeddings.to(dtype)

    def sq_norms(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return self._sq_norms.to(dtype)

    def fingerprint(self) -> str:
        """SHA-256 over the token list and the embedding bytes."""
        h = hashlib.sha256()
        h.update("\n".join(self.tokens).encode("utf-8"))
        h.update(self.embeddings.numpy().astype("<f4").tobytes())
        return h.hexdigest()

    def normalized(self) -> "LlmCodebook":
        """Copy with L2-normalized rows; zero rows stay zero."""
        norms = self.embeddings.norm(dim=1, keepdim=True)
        return LlmCodebook(self.tokens, self.embeddings / norms.clamp_min(1e-12), self.frozen)


def load_codebook(vocab_path: Path, embedding_path: Path, normalize: bool = False) -> LlmCodebook:
    """Load a vocabulary file and its embedding table into a frozen codebook."""
    tokens = read_vocab(vocab_path)
    table = read_embeddings(embedding_path)
    if table.shape[0] != len(tokens):
        raise ValidationError(
            f"Dimension mismatch: vocabulary {Path(vocab_path).name} has {len(tokens)} tokens "
            f"but {Path(embedding_path).name} has {table.shape[0]} rows"
        )
    cb = LlmCodebook(tokens, table)
    return cb.normalized() if normalize else cb


def write_codebook(cb: LlmCodebook, out_dir: Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    return (
        write_vocab(cb.tokens, out_dir / "vocab.txt"),
        write_embeddings(cb.embeddings.numpy(), out_dir / "embeddings.bin"),
    )


def synthetic_codebook(size: int, dim: int, seed: int) -> LlmCodebook:
    """Deterministic Gaussian codebook for runs without an exported LLM table."""
    if size < 2 or dim < 1:
        raise ValidationError(f"Invalid synthetic codebook size {size}x{dim}")
    rng = np.random.default_rng(seed)
    table = rng.standard_normal((size, dim)).astype(np.float32)
    tokens = list(DESK_WORDS[:size]) + [f"tok{i:05d}" for i in range(len(DESK_WORDS), size)]
    return LlmCodebook(tokens, table)


def squared_distances(flat: torch.Tensor, cb: LlmCodebook) -> torch.Tensor:
    """||z||^2 - 2 z.e + ||e||^2 for every row of flat (N x d) against every token."""
    table = cb.table(flat.dtype)
    d = (flat * flat).sum(dim=1, keepdim=True) - 2.0 * flat @ table.t() + cb.sq_norms(flat.dtype)[None, :]
    return d.clamp_min(0.0)


def _nearest_chunk(flat: torch.Tensor, cb: LlmCodebook) -> torch.Tensor:
    n = flat.shape[0]
    table = cb.table(flat.dtype)
    dist = squared_distances(flat, cb)
    best = dist.min(dim=1).values
    scale = (flat * flat).sum(dim=1) + cb.sq_norms(flat.dtype).max()
    slack = DISTANCE_RTOL * scale
    rows, cols = torch.nonzero(dist <= (best + slack)[:, None], as_tuple=True)

    exact = ((flat[rows] - table[cols]) ** 2).sum(dim=1)
    inf = torch.full((n,), float("inf"), dtype=flat.dtype)
    row_min = inf.scatter_reduce(0, rows, exact, reduce="amin")
    winners = exact == row_min[rows]
    ids = torch.full((n,), cb.size, dtype=torch.long)
    return ids.scatter_reduce(0, rows[winners], cols[winners], reduce="amin")


def nearest_ids(flat: torch.Tensor, cb: LlmCodebook) -> torch.Tensor:
    """Nearest token id per row of an N x d tensor; ties go to the lowest id."""
    if flat.ndim != 2 or flat.shape[1] != cb.dim:
        raise ValidationError(f"Expected N x {cb.dim} queries, got {tuple(flat.shape)}")
    with torch.no_grad():
        flat = flat.detach()
        if not torch.isfinite(flat).all():
            raise ValidationError("Non-finite query vector in nearest-token lookup")
        parts = [_nearest_chunk(flat[i:i + LOOKUP_CHUNK], cb) for i in range(0, flat.shape[0], LOOKUP_CHUNK)]
    return torch.cat(parts) if parts else torch.zeros(0, dtype=torch.long)


def nearest_token(vec, cb: LlmCodebook) -> int:
    """Token id minimizing the squared Euclidean distance to vec."""
    q = torch.as_tensor(vec)
    if not q.is_floating_point():
        q = q.to(torch.float64)
    if q.ndim != 1 or q.shape[0] != cb.dim:
        raise ValidationError(f"Query must have length {cb.dim}, got shape {tuple(q.shape)}")
    return int(nearest_ids(q[None, :], cb)[0])


def layer_sizes(latent_hw: tuple[int, int], depth: int, ratio: int = 4) -> list[tuple[int, int]]:
    """Layer grid sizes from coarsest to finest; the finest is the latent grid."""
    if depth < 1:
        raise ValidationError(f"Pyramid depth must be >= 1, got {depth}")
    if ratio < 2:
        raise ValidationError(f"Inter-layer ratio must be >= 2, got {ratio}")
    h, w = latent_hw
    sizes = [(h, w)]
    for _ in range(depth - 1):
        if h % ratio or w % ratio:
            raise ValidationError(
                f"Latent grid {latent_hw} cannot hold {depth} layers at ratio {ratio}"
            )
        h, w = h // ratio, w // ratio
        sizes.append((h, w))
    return sizes[::-1]


def pool_to_layer(latent: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Non-overlapping average pooling of a (B,)C x H' x W' latent to size (h, w)."""
    h, w = size
    H, W = latent.shape[-2:]
    if h < 1 or w < 1 or H % h or W % w:
        raise ValidationError(f"Latent grid {H}x{W} is not divisible into a {h}x{w} layer")
    kh, kw = H // h, W // w
    if kh == 1 and kw == 1:
        return latent
    return F.avg_pool2d(latent, kernel_size=(kh, kw))


def _upsample(grid: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    kh, kw = size[0] // grid.shape[-2], size[1] // grid.shape[-1]
    return grid.repeat_interleave(kh, dim=-2).repeat_interleave(kw, dim=-1)


@dataclass
class TokenPyramid:
    """D layers of token ids with their embeddings and cumulative reconstructions.

    All grids carry a leading batch axis: ids (B, h_l, w_l), embeddings
    (B, d, h_l, w_l), cumulative (B, d, H', W'). `pooled` holds the continuous
    layer features z_l that produced the ids; it is empty for pyramids rebuilt
    from stored ids.
    """
    ids: list[torch.Tensor]
    embeddings: list[torch.Tensor]
    cumulative: list[torch.Tensor]
    pooled: list[torch.Tensor] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.ids)

    @property
    def batch(self) -> int:
        return int(self.ids[0].shape[0])

    @property
    def sizes(self) -> list[tuple[int, int]]:
        return [(int(t.shape[-2]), int(t.shape[-1])) for t in self.ids]

    @property
    def finest(self) -> torch.Tensor:
        """Cumulative reconstruction at the last layer."""
        return self.cumulative[-1]

    @classmethod
    def from_ids(cls, ids: list[torch.Tensor], cb: LlmCodebook,
                 dtype: torch.dtype = torch.float32,
                 pooled: list[torch.Tensor] | None = None) -> "TokenPyramid":
        if not ids:
            raise ValidationError("Token pyramid needs at least one layer")
        finest = (int(ids[-1].shape[-2]), int(ids[-1].shape[-1]))
        table = cb.table(dtype)
        embeddings, cumulative = [], []
        running = None
        for l, grid in enumerate(ids):
            if int(grid.max()) >= cb.size or int(grid.min()) < 0:
                raise ValidationError(f"Layer {l + 1} holds token ids outside [0, {cb.size})")
            emb = table[grid].permute(0, 3, 1, 2).contiguous()
            embeddings.append(emb)
            up = _upsample(emb, finest)
            running = up if running is None else running + up
            cumulative.append(running / (l + 1))
        return cls(ids=list(ids), embeddings=embeddings, cumulative=cumulative, pooled=list(pooled or []))


def quantize_pyramid(latent: torch.Tensor, cb: LlmCodebook,
                     sizes: list[tuple[int, int]]) -> TokenPyramid:
    """Pool the latent to every layer, look up nearest tokens, build cumulative grids."""
    if latent.ndim == 3:
        latent = latent.unsqueeze(0)
    if latent.ndim != 4:
        raise ValidationError(f"Latent must be (B,) C x H' x W', got {tuple(latent.shape)}")
    if latent.shape[1] != cb.dim:
        raise ValidationError(
            f"Latent has {latent.shape[1]} channels but the codebook dim is {cb.dim}"
        )
    if tuple(sizes[-1]) != tuple(latent.shape[-2:]):
        raise ValidationError(
            f"Finest layer {tuple(sizes[-1])} must match the latent grid {tuple(latent.shape[-2:])}"
        )
    pooled, ids = [], []
    for size in sizes:
        z_l = pool_to_layer(latent, size)
        b, d, h, w = z_l.shape
        flat = z_l.permute(0, 2, 3, 1).reshape(-1, d)
        ids.append(nearest_ids(flat, cb).view(b, h, w))
        pooled.append(z_l)
    return TokenPyramid.from_ids(ids, cb, dtype=latent.dtype, pooled=pooled)


class _StraightThrough(Function):
    """Forward returns the quantized value; backward hands the gradient to z unchanged."""

    @staticmethod
    def forward(ctx, z, zq):
        return zq.clone()

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def straight_through(z: torch.Tensor, zq: torch.Tensor) -> torch.Tensor:
    if z.shape != zq.shape:
        raise ValidationError(f"Shape mismatch: z {tuple(z.shape)} vs quantized {tuple(zq.shape)}")
    return _StraightThrough.apply(z, zq.detach().to(z.dtype))
