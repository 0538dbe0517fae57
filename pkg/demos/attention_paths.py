"""The three attention paths agree; the tiled one bounds score memory."""
import numpy as np

from mosaicbert.alibi import alibi_slopes
from mosaicbert.attention import AttentionWeights, TileStats, mhsa_naive, mhsa_tiled, mhsa_unpadded
from mosaicbert.numerics import Tensor
from mosaicbert.unpad import padding_stats, unpad

rng = np.random.default_rng(0)
hidden, heads, length = 48, 4, 512
scale = hidden ** -0.5
w = AttentionWeights(*[Tensor(rng.normal(0, s, size=shape).astype(np.float32))
                       for shape, s in [((hidden, hidden), scale), ((hidden,), 0.1)] * 4], n_heads=heads)
x = Tensor(rng.normal(size=(2, length, hidden)).astype(np.float32))
lengths = np.array([512, 300])
mask = np.arange(length)[None, :] < lengths[:, None]
slopes = alibi_slopes(heads)
print("slopes:", ", ".join(f"{s:.4g}" for s in slopes.slopes))

ref = mhsa_naive(x, w, slopes, mask).data
for kb in (7, 64, 512):
    stats = TileStats()
    out = mhsa_tiled(x, w, slopes, mask, key_block=kb, stats=stats).data
    print(f"tiled kb={kb:3d}: max |diff| {np.abs(out - ref)[mask].max():.2e}, "
          f"peak scores {stats.peak_score_elements:,} ({stats.peak_score_bytes / 2**20:.2f} MiB per head)")
print(f"naive path holds {length * length:,} scores per head")

packed = unpad(x, mask)
out = mhsa_unpadded(packed, w, slopes, key_block=64).values.data
print(f"unpadded: {packed.total_tokens} of {mask.size} tokens, max |diff| {np.abs(out - ref[mask]).max():.2e}")
print("padding fraction:", f"{padding_stats(mask)['pad_fraction']:.3f}")
