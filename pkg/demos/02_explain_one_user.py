"""
Counterfactual explanations, method by method
=============================================

The attention model scores an item against the user's liked items, so
besides the influence-based searches we can also try the naive
"remove what the model attends to" baselines.  Each explanation is then
checked by refitting the model without the chosen items.
"""

from cfrec import Retrainer, binarize, build_dataset, explain, prune_users, train
from cfrec.evaluation import verify
from cfrec.explain import METHODS
from cfrec.influence import Influence
from cfrec.model import default_config
from cfrec.synthetic import desk_ratings

table = prune_users(binarize(desk_ratings()), 10, 10)
ds = build_dataset(table, "pairwise")
model = train(ds, default_config("attention"))
print(f"{ds.n} training triples, pool width {ds.pool_width}")

# start from the first user ACCENT can explain
engine = Influence(model)
k = 5
u = next(u for u in range(ds.n_users) if explain(model, u, k, engine=engine).success)
top = model.topk(u, k)
print(f"user {ds.user_ids[u]} likes {len(ds.profile(u))} items; top-{k}: {[int(ds.item_ids[i]) for i in top]}")

retrainer = Retrainer(model)
for method in METHODS:
    e = explain(model, u, k, method, engine=engine)
    line = f"{method:>15}: "
    if not e.success:
        print(line + "no counterfactual found")
        continue
    new_top, _ = verify(model, e, retrainer)
    tag = "replaced as predicted" if new_top == e.rec_star else (
        "displaced" if new_top != e.rec else "still on top")
    print(line + f"remove {[int(ds.item_ids[i]) for i in e.items]} -> "
          f"predicted {ds.item_ids[e.rec_star]}, refit gives {ds.item_ids[new_top]} ({tag})")

print(f"\n{retrainer.retrains} refits")
