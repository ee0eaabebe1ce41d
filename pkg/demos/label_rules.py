"""
From visit reports to one label per patient
===========================================

Each patient has a handful of follow-up radiology reports. The consolidation
rules reduce them to a single outcome, and every decision records the rule
that fired.
"""

from collections import Counter

from gbmbench.labels import consolidate_labels, rule_table

examples = [
    ["pseudoprogression", "progression"],
    ["pseudoprogression", "stable", "stable"],
    ["stable", "stable", "stable"],
    ["response", "distant_progression"],
    ["pseudoprogression"],
    ["pseudoprogression", "stable"],
]

for seq in examples:
    lab = consolidate_labels(seq)
    print(f"{' -> '.join(seq):55s} {lab.value.value:18s} ({lab.rule_fired.value})")

# %%
# The same engine, run over every sequence of up to four visits, gives the
# full rule table. Counting which rule decided each row shows how the
# precedence plays out.

table = rule_table(4)
print(len(table), "sequences")
print(Counter(lab.rule_fired.value for _, lab in table))
print(Counter(lab.value.value for _, lab in table))
