"""visiongrid: a self-hostable distributed vision-compute service.

The package splits into three layers:

* service plumbing -- :mod:`visiongrid.jobs`, :mod:`visiongrid.broker`,
  :mod:`visiongrid.coordinator`, :mod:`visiongrid.worker`,
  :mod:`visiongrid.storage`
* compute kernels -- :mod:`visiongrid.graph`, :mod:`visiongrid.classify`,
  :mod:`visiongrid.vip`, :mod:`visiongrid.stitch`
* clients -- :mod:`visiongrid.cli`

Importing the top-level package stays cheap; server/worker modules pull in
their heavier dependencies only when imported explicitly.
"""

__version__ = "0.1.0"
