"""Structure-then-match pipeline for oncology clinical trial eligibility.

Turns registry trial XML into DNF eligibility clause sets (via an LLM
backend or an offline dictionary baseline), matches them against structured
patient records using ontology subsumption, scores the results, and serves
a human-in-the-loop triage API.
"""

__version__ = "0.1.0"
