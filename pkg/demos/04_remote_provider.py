"""
Serving a guidance provider over HTTP
=====================================

Any ``GuidanceProvider`` can be put behind the binary wire protocol with
``ProviderServer`` and consumed with ``RemoteProvider``.  Noise seeds travel
in the request header, so a service that predicts exactly the noise it was
sent produces a zero distillation update.
"""
import numpy as np

from pyramid_trigrid.camera import CameraPose
from pyramid_trigrid.grid import PyramidTriGrid
from pyramid_trigrid.guidance import Conditioning, EchoNoiseProvider, SDSConfig, run_sds
from pyramid_trigrid.remote import ProviderServer, RemoteProvider
from pyramid_trigrid.render import Renderer

renderer = Renderer.init(channels=12, latent_dim=8, rng=0, samples_per_ray=16)
pyr = PyramidTriGrid.random((8, 16), 12, scale=0.3, rng=1)
before = [a.copy() for a in pyr.arrays]

with ProviderServer(EchoNoiseProvider()) as server:
    remote = RemoteProvider(server.url, timeout=10)
    print("health:", remote.health())
    img = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
    print("denoise round trip max diff:", np.abs(remote.denoise(img, 0.5, Conditioning()) - img).max())
    _, _, hist = run_sds(pyr, np.zeros(8, np.float32), renderer, remote, SDSConfig(steps=5),
                         CameraPose(image_size=16))

print("residual rms per step:", [h.residual_rms for h in hist])
print("grid unchanged:", all(np.array_equal(a, b) for a, b in zip(pyr.arrays, before)))
