/** Minimal typed event emitter; `on` returns an unsubscribe function. */

export class Emitter<Events extends object> {
	#handlers = new Map<keyof Events, Set<(data: never) => void>>();

	on<K extends keyof Events>(event: K, fn: (data: Events[K]) => void): () => void {
		let set = this.#handlers.get(event);
		if (!set) {
			set = new Set();
			this.#handlers.set(event, set);
		}
		set.add(fn as (data: never) => void);
		return () => set.delete(fn as (data: never) => void);
	}

	emit<K extends keyof Events>(event: K, data: Events[K]): void {
		const set = this.#handlers.get(event);
		if (!set) return;
		for (const fn of set) (fn as (data: Events[K]) => void)(data);
	}

	clear(): void {
		this.#handlers.clear();
	}
}
