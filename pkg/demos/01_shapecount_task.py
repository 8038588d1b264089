"""A walk through the ShapeCount task and its verifier.

Run: python3 demos/01_shapecount_task.py
"""
import numpy as np

from tor_rlvr import synthtask as st

task = st.TaskConfig()   # 3x3 grid, four symbols, "count" questions
print("vocabulary size", task.vocab_size)

# a few samples, each fully determined by its seed
for seed in range(3):
    s = st.generate_sample(seed, task)
    print(f"\nseed {seed}")
    print(np.vectorize(lambda c: "." if c == 0 else st.symbol_name(c))(s.grid))
    print("question:", st.decode(s.question), " answer:", s.answer)
    print("gold response:", st.decode(st.render_gold(s)))

# the verifier only rewards one well-formed span holding the right number
s = st.generate_sample(0, task)
gold = st.render_gold(s)
wrong = st.encode("ANS_START 7 ANS_END EOS")
print("\nreward(gold) =", st.verify(gold, s.answer))
print("reward(wrong) =", st.verify(wrong, s.answer))
print("reward(no span) =", st.verify(st.encode("EOS"), s.answer))

# answer distribution: a constant guess of the mode is the chance baseline
answers = [st.generate_sample(k, task).answer for k in range(5000)]
values, counts = np.unique(answers, return_counts=True)
print("\nanswer frequencies:", {str(v): round(float(c), 3) for v, c in zip(values, counts / counts.sum())})
