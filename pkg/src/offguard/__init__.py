"""Secure offloading of neural-network inference to untrusted workers.

Three independent protections, combinable per offload plan:

* data privacy     - one-time additive input masks with precomputed
                     mask-products (masking)
* confidentiality  - additive weight shares across two non-colluding
                     workers (masking)
* integrity        - a Merkle commitment over every intermediate tensor,
                     spot-checked asynchronously by recomputing randomly
                     selected verify units (commitment, worker, client)

plus an analysis toolkit that validates each closed-form security
estimate by Monte Carlo (analysis).
"""

from .client import (
    InferenceRecord,
    OffloadClient,
    OffloadPlan,
    VerificationVerdict,
    detection_failure_probability,
    select_verification,
)
from .commitment import (
    MerkleCommit,
    MerkleProof,
    UnitLayout,
    build_commit,
    hash_unit,
    open_units,
    slice_layout,
    verify_proof,
)
from .container import load_model, model_from_bytes, model_to_bytes, save_model
from .geometry import Region
from .masking import (
    MaskSet,
    WeightShares,
    combine_shares,
    expected_leak_count,
    generate_masks,
    mask_input,
    masking_failure_rate,
    split_weights,
    unmask_output,
)
from .nn import (
    LayerSpec,
    ModelSpec,
    conv2d,
    dense,
    flatten,
    forward_layer,
    forward_model,
    infer_shapes,
    relu,
    softmax,
)
from .tensor import Tensor, as_tensor, load_tensor, save_tensor
from .transport import DirectSession, TcpSession, connect
from .worker import Cheat, Honest, WorkerCore, serve

__version__ = "0.1.0"
