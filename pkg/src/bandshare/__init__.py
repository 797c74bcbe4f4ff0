"""Flow-level simulator and mechanism library for truthful bandwidth prioritization.

A shared router sells per-epoch capacity to buyers with linear per-KB values.
The library provides the demand models, routing policies (FIFO / FQ / SPQ and a
threshold hybrid), payment mechanisms (fixed price, per-epoch VCG, and the
bid-resampling rebate scheme), strategic buyer agents, and multi-seller revenue
pooling, plus a CLI for running the packaged experiment scenarios.
"""

from bandshare.demand import (
    DemandRealization,
    DemandSpec,
    FlowTraceParams,
    buffered_demand,
    check_natural,
    cliff_demand,
    constant_demand,
    flow_trace_demand,
    impatient_demand,
    increasing_rate_demand,
    increasing_total_demand,
    time_varying_demand,
)
from bandshare.engine import (
    BuyerSpec,
    Scenario,
    SessionOutcome,
    offline_optimum,
    run_monte_carlo,
    run_session,
    strategy_delay,
    strategy_greedy,
    strategy_misreport,
    strategy_pad,
)
from bandshare.payments import (
    BidRecord,
    MeanCI,
    PaymentOutcome,
    bks_settle,
    expected_bks_payment,
    fixed_price_eligibility,
    fixed_price_settle,
    resample_bid,
    vmm_epoch_charges,
)
from bandshare.pooling import (
    LedgerRow,
    PoolSettlement,
    SellerLedger,
    seller_credit,
    settle_pool,
    tax_admissibility_estimate,
)
from bandshare.routing import (
    EpochRequest,
    allocate_fifo,
    allocate_fq,
    allocate_spq,
)

__version__ = "0.1.0"
