"""Data-driven Markov models of fading wireless links for stochastic MPC.

Modules
-------
channel_physics   path loss, SINR and IEEE 802.15.4 error rates
fading_sim        Yule-Walker AR fading generators and the coupled SINR simulator
fsmc_baseline     physics-based finite-state Markov channel (moment matching)
cart              CART regression trees
markov_learner    two-tree identification of the channel Markov chain
plant_sarx        inverted pendulum plant and switching ARX identification
qp                dense convex QP solver
smpc              stochastic MPC on expectation dynamics
harness           corpus generation, Monte Carlo studies and metrics
"""

__version__ = "0.1.0"
