"""Query-based black-box adversarial patch attacks on pixel-wise regression.

The package optimizes a universal adversarial patch against a black-box
depth or optical-flow oracle using square-area gradient estimation from
probe scores, error-guided square sampling, and Adam updates, with a
random-search baseline, a query-fingerprint detector plus bypass, and a
binary wire protocol for attacking models over HTTP.
"""

from .attack import PatchAttack, center_location, evaluate_patch
from .baseline import RandomSearchAttack
from .defense import (
    DefendedOracle,
    DetectorConfig,
    QueryFingerprintDetector,
    RandomizedOracle,
    fingerprint_query,
    randomize_sample,
)
from .gradient import (
    AdamState,
    adam_step,
    adjust_scores,
    estimate_gradient,
    generate_probes,
    multi_position_gradient,
    score_probes,
    square_gradient,
)
from .oracles import (
    Oracle,
    QueryBudgetExceeded,
    QueryCounter,
    ReferenceCache,
    SampleSet,
    make_synthetic_oracle,
    mean_error,
    pixel_error_map,
    white_box_gradient,
    white_box_reference,
)
from .remote import (
    ProtocolError,
    RemoteOracle,
    ServiceError,
    TransportError,
    TruncationError,
    decode_tensor,
    encode_tensor,
)
from .sampling import (
    SquareRegion,
    location_probabilities,
    sample_square,
    smooth_error_map,
    square_size,
)
from .tensor import (
    BoundsError,
    PpmParseError,
    attach,
    crop,
    init_striped_patch,
    read_ppm,
    write_ppm,
)

__version__ = "0.1.0"
