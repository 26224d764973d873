"""slicesolver: slice-attention surrogate solver for mesh fields.

Library layout:

* ``linalg``      dense kernels (matmul variants, softmax, layer norm, rng)
* ``autodiff``    reverse-mode tape with tile-level gradient checkpointing
* ``attention``   slice attention: original / fast / tiled paths
* ``model``       full network, parameter init, checkpoint files
* ``training``    amortized subset training, AdamW, cosine schedule
* ``statecache``  chunked state-cache construction and per-point decoding
* ``costmodel``   complexity tables, flop ratio, tape memory model, counters
* ``meshes``      synthetic spheres, manufactured fields, mesh file I/O
* ``quadrature``  surface force integrals, drag/lift, convergence rates
* ``metrics``     relative L2, R^2, MAE
* ``cli``         the ``slicesolver`` command
"""

from .attention import (HeadParams, SliceAccumulator, deslice_fast, deslice_original,
                        multihead_physattn, physattn_tiled, slice_fast, slice_original,
                        states_attention)
from .counters import count_ops
from .meshes import (MeshBatch, gen_random_sphere_mesh, gen_sphere_mesh,
                     manufactured_field, manufactured_shear, read_mesh,
                     read_mesh_chunks, write_mesh)
from .metrics import mae_per_column, metrics, r2_per_column, rel_l2
from .model import (ModelConfig, ModelParams, forward, init_params, load_checkpoint,
                    param_count, params_fingerprint, save_checkpoint)
from .quadrature import (ConvergenceResult, FlowConstants, integrate_force,
                         quadrature_convergence, reference_force)
from .statecache import (ChunkPlan, StateCache, build_cache, decode_points,
                         decode_stream, load_cache, save_cache)
from .training import (AdamW, TrainConfig, TrainResult, amortized_sample, backward,
                       cosine_lr, train)

__version__ = "0.1.0"
